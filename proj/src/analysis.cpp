#include "roboenc/analysis.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "roboenc/errors.hpp"
#include "roboenc/rng.hpp"

namespace roboenc {

namespace {

constexpr std::size_t kChunk = 128;

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::string percent(double fraction) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << 100.0 * fraction;
  return out.str();
}

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

GradientRecord sign_gradient_record(const Model& model, const Dataset& data, const std::string& layer,
                                    std::string model_id) {
  return sign_gradient_record(model, data, layer, {}, std::move(model_id));
}

GradientRecord sign_gradient_record(const Model& model, const Dataset& data, const std::string& layer,
                                    std::span<const double> example_scale, std::string model_id) {
  if (!example_scale.empty() && example_scale.size() != data.size()) {
    throw ContractError("one gradient scale per example required");
  }
  const std::size_t n = data.size();
  std::vector<double> signs;
  Shape record_shape;
  for (std::size_t b = 0; b < n; b += kChunk) {
    const std::size_t e = std::min(n, b + kChunk);
    Tape tape;
    const std::vector<Var> params = bind_params(tape, model, false);
    Var x = tape.leaf(data.images.slice_rows(b, e));
    const ForwardTrace trace = forward_on(tape, model, params, x, false, 0);
    const auto hit = std::find_if(trace.tagged.begin(), trace.tagged.end(),
                                  [&](const auto& tag) { return tag.first == layer; });
    if (hit == trace.tagged.end()) throw ContractError("model has no layer tagged '" + layer + "'");

    const std::span<const std::size_t> labels(data.labels.data() + b, e - b);
    Var per = per_example_loss(model.head, trace.output, labels);
    if (!example_scale.empty()) {
      Tensor s(Shape{e - b});
      for (std::size_t i = b; i < e; ++i) s[i - b] = example_scale[i];
      per = ad::mul(per, tape.constant(std::move(s)));
    }
    Tensor g = tape.backward(ad::sum(per)).of(hit->second);

    Shape shape = g.shape();
    const bool conv = layer.rfind("conv", 0) == 0;
    if (conv) {
      // [B, C, H, W] -> channel mean [B, H, W]
      const std::size_t bsz = shape[0], c = shape[1], hw = shape[2] * shape[3];
      Tensor avg(Shape{bsz, shape[2], shape[3]}, 0.0);
      for (std::size_t i = 0; i < bsz; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p) avg[i * hw + p] += g[(i * c + ch) * hw + p];
      for (double& v : avg.data()) v /= static_cast<double>(c);
      g = std::move(avg);
      shape = g.shape();
    }
    for (double v : g.data()) signs.push_back(sign(v));
    if (record_shape.empty()) record_shape = shape;
  }
  record_shape[0] = n;
  return GradientRecord{std::move(model_id), layer, Tensor(record_shape, std::move(signs))};
}

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ContractError("pearson needs equal, non-empty vectors");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) return std::nullopt;
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

std::optional<double> pearson_sign_correlation(const GradientRecord& a, const GradientRecord& b) {
  if (a.layer != b.layer) throw ContractError("gradient records come from different layers");
  if (a.signs.shape() != b.signs.shape()) throw ContractError("gradient record shapes differ");
  return pearson(a.signs.data(), b.signs.data());
}

TransferMatrix attack_transfer_matrix(std::span<const NamedModel> models, const AttackSpec& attack,
                                      const Dataset& data) {
  if (models.size() < 2) throw ContractError("transfer matrix needs at least two models");
  const std::size_t m = models.size();
  TransferMatrix out;
  std::vector<GradientRecord> records;
  std::vector<Tensor> adversarial;
  for (const NamedModel& nm : models) {
    if (nm.model.arch.input_shape != models[0].model.arch.input_shape) {
      throw ContractError("transfer matrix models differ in input shape");
    }
    out.names.push_back(nm.name);
    out.clean.push_back(accuracy(nm.model, data.images, data.labels));
    records.push_back(sign_gradient_record(nm.model, data, "input", nm.name));
    adversarial.push_back(generate_attack(nm.model, data.images, data.labels, attack));
  }
  out.accuracy.assign(m, std::vector<double>(m, 0.0));
  out.rho.assign(m, std::vector<std::optional<double>>(m));
  for (std::size_t g = 0; g < m; ++g) {
    for (std::size_t f = 0; f < m; ++f) {
      out.accuracy[g][f] = evaluate_attack(models[g].model, data.images, data.labels, adversarial[f]);
      out.rho[g][f] = pearson_sign_correlation(records[g], records[f]);
    }
  }
  return out;
}

std::string transfer_matrix_csv(const TransferMatrix& m) {
  std::ostringstream out;
  out << "target\\source";
  for (const auto& n : m.names) out << ',' << n;
  out << '\n';
  for (std::size_t g = 0; g < m.names.size(); ++g) {
    out << m.names[g];
    for (std::size_t f = 0; f < m.names.size(); ++f) out << ',' << percent(m.accuracy[g][f]);
    out << '\n';
  }
  return out.str();
}

nlohmann::json transfer_matrix_json(const TransferMatrix& m) {
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t g = 0; g < m.names.size(); ++g) {
    for (std::size_t f = 0; f < m.names.size(); ++f) {
      cells.push_back({{"target", m.names[g]},
                       {"source", m.names[f]},
                       {"accuracy", m.accuracy[g][f]},
                       {"rho", optional_json(m.rho[g][f])}});
    }
  }
  return {{"models", m.names}, {"clean", m.clean}, {"cells", cells}};
}

double landscape_quantity(const Model& model, const Tensor& x, std::size_t t) {
  const Tensor s = forward(model, x);
  if (model.head.uses_codebook()) return loss(model.head, s, t);
  if (t >= s.size()) throw ContractError("landscape label out of range");
  return s[t];
}

LandscapeGrid loss_landscape(const Model& model, const Tensor& x, std::size_t t, double extent,
                             std::size_t resolution, std::uint64_t seed) {
  if (resolution % 2 == 0) throw ContractError("landscape resolution must be odd");
  if (!(extent >= 0.0)) throw ContractError("landscape extent must be >= 0");
  if (x.shape() != model.arch.input_shape) throw ShapeError("landscape expects a single example");
  LandscapeGrid grid;
  grid.extent = extent;
  grid.resolution = resolution;
  grid.r1 = input_gradient(model, x, t);
  for (double& v : grid.r1.data()) v = sign(v);
  grid.r2 = Tensor(x.shape());
  Rng rng(seed);
  for (double& v : grid.r2.data()) v = rng.rademacher();

  const std::size_t c = resolution / 2;
  for (std::size_t i = 0; i < resolution; ++i) {
    grid.axis.push_back(c == 0 ? 0.0
                               : extent * (static_cast<double>(i) - static_cast<double>(c)) /
                                     static_cast<double>(c));
  }
  grid.z = Tensor(Shape{resolution, resolution});
  Tensor point(x.shape());
  for (std::size_t i = 0; i < resolution; ++i) {
    for (std::size_t j = 0; j < resolution; ++j) {
      for (std::size_t p = 0; p < x.size(); ++p) {
        point[p] = std::clamp(x[p] + grid.axis[i] * grid.r1[p] + grid.axis[j] * grid.r2[p], 0.0, 1.0);
      }
      grid.z[i * resolution + j] = landscape_quantity(model, point, t);
    }
  }
  grid.base = landscape_quantity(model, x, t);
  return grid;
}

std::string landscape_csv(const LandscapeGrid& grid) {
  std::ostringstream out;
  out << std::setprecision(17) << "x,y,z\n";
  for (std::size_t i = 0; i < grid.resolution; ++i) {
    for (std::size_t j = 0; j < grid.resolution; ++j) {
      out << grid.axis[i] << ',' << grid.axis[j] << ',' << grid.z[i * grid.resolution + j] << '\n';
    }
  }
  return out.str();
}

std::vector<SweepRow> dimension_sweep(std::span<const std::size_t> l_values, const SweepTemplate& tmpl,
                                      const Dataset& train_set, const Dataset& test_set,
                                      const AttackSpec& attack, const Model& substitute) {
  const std::size_t k = train_set.classes;
  const Tensor black = generate_attack(substitute, test_set.images, test_set.labels, attack);
  std::vector<SweepRow> rows;
  for (std::size_t l : l_values) {
    if (l < k) throw ContractError("sweep dimension " + std::to_string(l) + " is below the class count");
    const Codebook cb = generate_codebook(k, l, tmpl.beta, derive_seed(tmpl.seed, "codebook"));
    Model model = make_model(preset_architecture(tmpl.preset, train_set.example_shape(), l),
                             Head::codebook_mse(cb), derive_seed(tmpl.seed, "model"));
    model = train(std::move(model), train_set, tmpl.train).model;
    SweepRow row;
    row.l = l;
    row.clean = accuracy(model, test_set.images, test_set.labels);
    row.white_box = evaluate_attack(model, test_set.images, test_set.labels,
                                    generate_attack(model, test_set.images, test_set.labels, attack));
    row.black_box = evaluate_attack(model, test_set.images, test_set.labels, black);
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  std::ostringstream out;
  out << "l,clean,white_box,black_box\n";
  for (const SweepRow& r : rows) {
    out << r.l << ',' << percent(r.clean) << ',' << percent(r.white_box) << ',' << percent(r.black_box) << '\n';
  }
  return out.str();
}

}  // namespace roboenc
