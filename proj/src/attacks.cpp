#include "roboenc/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "roboenc/errors.hpp"
#include "roboenc/rng.hpp"

namespace roboenc {

namespace {

constexpr std::size_t kChunk = 128;

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::string family_name(AttackFamily f) {
  switch (f) {
    case AttackFamily::fgsm: return "fgsm";
    case AttackFamily::pgd: return "pgd";
    case AttackFamily::random_search: return "random-search";
  }
  return "unknown";
}

std::string objective_name(AttackObjective o) {
  return o == AttackObjective::head_loss ? "head-loss" : "cw-margin";
}

// Adds a leading batch axis when x is a single example.
Tensor as_batch(const Model& model, const Tensor& x, bool& single) {
  single = x.shape() == model.arch.input_shape;
  if (!single) return x;
  Shape s{1};
  s.insert(s.end(), x.shape().begin(), x.shape().end());
  return x.reshaped(std::move(s));
}

void check_batch(const Tensor& x, std::span<const std::size_t> labels) {
  if (x.rank() == 0 || x.dim(0) != labels.size()) {
    throw ContractError("attack needs one label per example");
  }
}

// Runs `fn(chunk, chunk_labels, first_index)` over row chunks and stacks the results.
template <typename Fn>
Tensor chunked(const Tensor& x, std::span<const std::size_t> labels, Fn&& fn) {
  const std::size_t n = x.dim(0);
  if (n <= kChunk) return fn(x, labels, std::size_t{0});
  Tensor out(x.shape());
  const std::size_t stride = x.size() / n;
  for (std::size_t b = 0; b < n; b += kChunk) {
    const std::size_t e = std::min(n, b + kChunk);
    const Tensor part = fn(x.slice_rows(b, e), labels.subspan(b, e - b), b);
    std::copy(part.data().begin(), part.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * stride));
  }
  return out;
}

// Moves v toward x0 by single ulps until |v - x0| <= eps holds in floating point.
double fit_box(double v, double x0, double eps) {
  while (std::abs(v - x0) > eps) v = std::nextafter(v, x0);
  return v;
}

// Box-projected, pixel-clamped step from x0 + offset.
double project(double v, double x0, double eps) {
  return std::clamp(fit_box(std::clamp(v, x0 - eps, x0 + eps), x0, eps), 0.0, 1.0);
}

void require_unit_box(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("attack input outside [0, 1]");
  }
}

}  // namespace

double AttackSpec::step_size() const {
  if (step) return *step;
  return 2.5 * epsilon / static_cast<double>(iters);
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack epsilon must be >= 0");
  if (family == AttackFamily::pgd && iters < 1) throw ConfigError("pgd needs iters >= 1");
  if (restarts < 1) throw ConfigError("attack restarts must be >= 1");
  if (!(kappa >= 0.0)) throw ConfigError("attack kappa must be >= 0");
  if (trials < 1) throw ConfigError("random search needs trials >= 1");
  if (step && !(*step > 0.0)) throw ConfigError("attack step must be > 0");
}

nlohmann::json attack_spec_to_json(const AttackSpec& spec) {
  nlohmann::json j{{"family", family_name(spec.family)},
                   {"epsilon", spec.epsilon},
                   {"iters", spec.iters},
                   {"restarts", spec.restarts},
                   {"random_start", spec.random_start},
                   {"objective", objective_name(spec.objective)},
                   {"kappa", spec.kappa},
                   {"trials", spec.trials},
                   {"seed", spec.seed}};
  if (spec.step) j["step"] = *spec.step;
  if (spec.target) j["target"] = *spec.target;
  return j;
}

AttackSpec attack_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("attack spec must be a JSON object");
  static const std::vector<std::string> known{"family", "epsilon", "step",  "iters",  "restarts", "random_start",
                                              "objective", "kappa", "target", "trials", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown attack field '" + key + "'");
    }
  }
  AttackSpec s;
  try {
    if (j.contains("family")) {
      const std::string f = j.at("family").get<std::string>();
      if (f == "fgsm") s.family = AttackFamily::fgsm;
      else if (f == "pgd") s.family = AttackFamily::pgd;
      else if (f == "random-search") s.family = AttackFamily::random_search;
      else throw ConfigError("unknown attack family '" + f + "'");
    }
    if (j.contains("objective")) {
      const std::string o = j.at("objective").get<std::string>();
      if (o == "head-loss") s.objective = AttackObjective::head_loss;
      else if (o == "cw-margin") s.objective = AttackObjective::cw_margin;
      else throw ConfigError("unknown attack objective '" + o + "'");
    }
    s.epsilon = j.value("epsilon", s.epsilon);
    if (j.contains("step")) s.step = j.at("step").get<double>();
    s.iters = j.value("iters", s.iters);
    s.restarts = j.value("restarts", s.restarts);
    s.random_start = j.value("random_start", s.random_start);
    s.kappa = j.value("kappa", s.kappa);
    if (j.contains("target")) s.target = j.at("target").get<std::size_t>();
    s.trials = j.value("trials", s.trials);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("attack spec: ") + e.what());
  }
  s.validate();
  return s;
}

ObjectiveGradient attack_objective(const Model& model, const Tensor& x,
                                   std::span<const std::size_t> labels, const AttackSpec& spec) {
  bool single = false;
  Tensor xb = as_batch(model, x, single);
  check_batch(xb, labels);
  const Head& head = model.head;
  const std::size_t n = labels.size();
  std::vector<std::size_t> target_labels;
  if (spec.target) {
    if (*spec.target >= head.classes) throw ContractError("attack target out of range");
    target_labels.assign(n, *spec.target);
  }

  Tape tape;
  const std::vector<Var> params = bind_params(tape, model, false);
  Var xv = tape.leaf(std::move(xb));
  Var s = forward_on(tape, model, params, xv, false, 0).output;
  Var j;
  if (spec.objective == AttackObjective::head_loss) {
    j = spec.target ? ad::scale(per_example_loss(head, s, target_labels), -1.0)
                    : per_example_loss(head, s, labels);
  } else {
    if (head.kind != HeadKind::codebook_mse) throw ContractError("cw-margin needs a codebook MSE head");
    Var d = ad::row_mse(s, head.codebook->rows);
    Var clamped = spec.target ? ad::clamp_min(ad::scale(ad::margin(d, target_labels), -1.0), -spec.kappa)
                              : ad::clamp_min(ad::margin(d, labels), -spec.kappa);
    j = ad::scale(clamped, -1.0);
  }
  ObjectiveGradient out;
  out.value = j.value().values();
  out.grad = tape.backward(ad::sum(j)).of(xv);
  if (single) out.grad = out.grad.reshaped(x.shape());
  return out;
}

double cw_margin_from_distances(std::span<const double> d, std::size_t t, double kappa) {
  if (d.size() < 2) throw ContractError("cw margin needs at least two classes");
  if (t >= d.size()) throw ContractError("cw margin label out of range");
  if (!(kappa >= 0.0)) throw ContractError("cw margin needs kappa >= 0");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i != t) best = std::min(best, d[i]);
  }
  return std::max(best - d[t], -kappa);
}

double cw_margin(const Model& model, const Tensor& x, std::size_t t, double kappa) {
  const Head& head = model.head;
  if (head.kind != HeadKind::codebook_mse) throw ContractError("cw margin needs a codebook MSE head");
  const Tensor s = forward(model, x);
  const Codebook& cb = *head.codebook;
  std::vector<double> d(cb.k, 0.0);
  for (std::size_t i = 0; i < cb.k; ++i) {
    for (std::size_t j = 0; j < cb.l; ++j) {
      const double diff = s[j] - cb.rows[i * cb.l + j];
      d[i] += diff * diff;
    }
    d[i] /= static_cast<double>(cb.l);
  }
  return cw_margin_from_distances(d, t, kappa);
}

Tensor fgsm(const Model& model, const Tensor& x, std::span<const std::size_t> labels, double epsilon) {
  if (!(epsilon >= 0.0)) throw ContractError("fgsm epsilon must be >= 0");
  bool single = false;
  const Tensor xb = as_batch(model, x, single);
  check_batch(xb, labels);
  require_unit_box(xb);
  AttackSpec spec;
  spec.epsilon = epsilon;
  Tensor out = chunked(xb, labels, [&](const Tensor& part, std::span<const std::size_t> lab, std::size_t) {
    const Tensor g = attack_objective(model, part, lab, spec).grad;
    Tensor adv = part;
    for (std::size_t i = 0; i < adv.size(); ++i) {
      adv[i] = project(part[i] + epsilon * sign(g[i]), part[i], epsilon);
    }
    return adv;
  });
  return single ? out.reshaped(x.shape()) : out;
}

Tensor fgsm(const Model& model, const Tensor& x, std::size_t t, double epsilon) {
  const std::size_t labels[] = {t};
  return fgsm(model, x, labels, epsilon);
}

Tensor pgd(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
           const AttackSpec& spec) {
  spec.validate();
  bool single = false;
  const Tensor xb = as_batch(model, x, single);
  check_batch(xb, labels);
  require_unit_box(xb);
  const double eps = spec.epsilon;
  const double alpha = spec.step_size();

  Tensor out = chunked(xb, labels, [&](const Tensor& x0, std::span<const std::size_t> lab, std::size_t first) {
    const std::size_t n = x0.dim(0), stride = x0.size() / n;
    Tensor best = x0;
    std::vector<double> best_value(n, -std::numeric_limits<double>::infinity());
    for (std::size_t r = 0; r < spec.restarts; ++r) {
      Tensor cur = x0;
      if (spec.random_start && eps > 0.0) {
        for (std::size_t e = 0; e < n; ++e) {
          Rng rng(derive_seed(derive_seed(spec.seed, first + e), r));
          for (std::size_t i = e * stride; i < (e + 1) * stride; ++i) {
            cur[i] = project(x0[i] + rng.uniform(-eps, eps), x0[i], eps);
          }
        }
      }
      for (std::size_t it = 0; it < spec.iters; ++it) {
        const Tensor g = attack_objective(model, cur, lab, spec).grad;
        for (std::size_t i = 0; i < cur.size(); ++i) {
          cur[i] = project(cur[i] + alpha * sign(g[i]), x0[i], eps);
        }
      }
      const std::vector<double> value = attack_objective(model, cur, lab, spec).value;
      for (std::size_t e = 0; e < n; ++e) {
        if (value[e] > best_value[e]) {
          best_value[e] = value[e];
          std::copy_n(cur.data().begin() + static_cast<std::ptrdiff_t>(e * stride), stride,
                      best.data().begin() + static_cast<std::ptrdiff_t>(e * stride));
        }
      }
    }
    return best;
  });
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (std::abs(out[i] - xb[i]) > eps || out[i] < 0.0 || out[i] > 1.0) {
      throw NumericError("pgd result left the feasible set");
    }
  }
  return single ? out.reshaped(x.shape()) : out;
}

Tensor generate_attack(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                       const AttackSpec& spec) {
  spec.validate();
  switch (spec.family) {
    case AttackFamily::fgsm: {
      if (spec.objective == AttackObjective::head_loss && !spec.target) {
        return fgsm(model, x, labels, spec.epsilon);
      }
      AttackSpec one = spec;
      one.iters = 1;
      one.restarts = 1;
      one.random_start = false;
      one.step = spec.epsilon > 0.0 ? std::optional<double>(spec.epsilon) : std::nullopt;
      if (spec.epsilon == 0.0) return x;
      return pgd(model, x, labels, one);
    }
    case AttackFamily::pgd:
      return pgd(model, x, labels, spec);
    case AttackFamily::random_search: {
      bool single = false;
      const Tensor xb = as_batch(model, x, single);
      check_batch(xb, labels);
      Tensor out = xb;
      const std::size_t stride = xb.size() / xb.dim(0);
      for (std::size_t e = 0; e < xb.dim(0); ++e) {
        const Tensor xe = xb.slice_rows(e, e + 1).reshaped(model.arch.input_shape);
        if (auto found = random_search_probe(model, xe, spec.epsilon, spec.trials, derive_seed(spec.seed, e))) {
          std::copy(found->data().begin(), found->data().end(),
                    out.data().begin() + static_cast<std::ptrdiff_t>(e * stride));
        }
      }
      return single ? out.reshaped(x.shape()) : out;
    }
  }
  throw ContractError("unknown attack family");
}

std::optional<Tensor> random_search_probe(const Model& model, const Tensor& x, double epsilon,
                                          std::size_t trials, std::uint64_t seed) {
  if (trials < 1) throw ContractError("random search needs trials >= 1");
  if (!(epsilon >= 0.0)) throw ContractError("random search epsilon must be >= 0");
  if (x.shape() != model.arch.input_shape) throw ShapeError("random search expects a single example");
  require_unit_box(x);
  if (epsilon == 0.0) return std::nullopt;
  Shape batch_shape{1};
  batch_shape.insert(batch_shape.end(), x.shape().begin(), x.shape().end());
  const std::size_t original = predict(model, x.reshaped(batch_shape))[0];
  Rng rng(seed);
  constexpr std::size_t kBatch = 64;
  for (std::size_t done = 0; done < trials;) {
    const std::size_t m = std::min(kBatch, trials - done);
    batch_shape[0] = m;
    Tensor cand(batch_shape);
    for (std::size_t c = 0; c < m; ++c) {
      for (std::size_t i = 0; i < x.size(); ++i) {
        cand[c * x.size() + i] = project(x[i] + epsilon * rng.rademacher(), x[i], epsilon);
      }
    }
    const std::vector<std::size_t> pred = predict(model, cand);
    for (std::size_t c = 0; c < m; ++c) {
      if (pred[c] != original) return cand.slice_rows(c, c + 1).reshaped(x.shape());
    }
    done += m;
  }
  return std::nullopt;
}

double evaluate_attack(const Model& target, const Tensor& examples,
                       std::span<const std::size_t> labels, const Tensor& adversarial) {
  if (examples.shape() != adversarial.shape() || examples.rank() == 0 ||
      examples.dim(0) != labels.size()) {
    throw ContractError("evaluate_attack: examples, labels and adversarial inputs differ in length");
  }
  return accuracy(target, adversarial, labels);
}

}  // namespace roboenc
