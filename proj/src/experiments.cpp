#include "roboenc/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <type_traits>

#include "roboenc/analysis.hpp"
#include "roboenc/binary_io.hpp"
#include "roboenc/errors.hpp"
#include "roboenc/rng.hpp"

namespace roboenc {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

// Reads one config object. Every value read (or defaulted) is copied into
// `out`, which becomes the canonical form; keys never read are rejected.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    T v = has(key) ? convert<T>(key) : std::move(fallback);
    out[key] = v;
    return v;
  }

  template <class T>
  T need(const std::string& key) {
    if (!has(key)) throw ConfigError(where_ + ": missing field '" + key + "'");
    T v = convert<T>(key);
    out[key] = v;
    return v;
  }

  template <class T>
  std::optional<T> maybe(const std::string& key) {
    if (!has(key)) return std::nullopt;
    T v = convert<T>(key);
    out[key] = v;
    return v;
  }

  const json& sub(const std::string& key) {
    if (!has(key)) throw ConfigError(where_ + ": missing field '" + key + "'");
    return j_.at(key);
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(where_ + ": unknown field '" + item.key() + "'");
    }
  }

  json out = json::object();

 private:
  template <class T>
  static bool fits(const json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      return v.is_boolean();
    } else if constexpr (std::is_unsigned_v<T>) {
      return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    } else if constexpr (std::is_floating_point_v<T>) {
      return v.is_number();
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v.is_string();
    } else {
      if (!v.is_array()) return false;
      return std::all_of(v.begin(), v.end(), [](const json& e) { return fits<typename T::value_type>(e); });
    }
  }

  template <class T>
  T convert(const std::string& key) {
    const json& v = j_.at(key);
    if (!fits<T>(v)) throw ConfigError(path(key) + " has the wrong type");
    return v.get<T>();
  }

  json j_;
  std::string where_;
  std::set<std::string> seen_;
};

struct Context {
  std::uint64_t seed = 0;
  RunOptions opts;

  fs::path data_file(const std::string& p) const { return resolve(opts.data_dir, p); }
  fs::path config_file(const std::string& p) const { return resolve(opts.config_dir, p); }
  fs::path out(const std::string& name) const { return opts.out_dir / name; }

  static fs::path resolve(const fs::path& root, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : root / path;
  }
};

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw FormatError("referenced file does not exist: " + p.string());
}

void write_text(const fs::path& p, const std::string& text) { io::write_file(p, text); }

// ---------------------------------------------------------------- data

struct DataConfig {
  std::string source = "synthetic";
  std::size_t classes = 10;
  std::size_t image_size = 28;
  std::optional<std::size_t> train_per_class;
  std::optional<std::size_t> test_per_class;
  std::string train_images, train_labels, test_images, test_labels;
};

DataConfig parse_data(const json& j, json& canonical) {
  Fields f(j, "data");
  DataConfig d;
  d.source = f.get<std::string>("source", "synthetic");
  if (d.source == "synthetic") {
    d.classes = f.get<std::size_t>("classes", 10);
    d.image_size = f.get<std::size_t>("image_size", 28);
    d.train_per_class = f.get<std::size_t>("train_per_class", 200);
    d.test_per_class = f.get<std::size_t>("test_per_class", 50);
    if (d.classes < 2 || d.classes > 10) throw ConfigError("data.classes must be in [2, 10]");
    if (d.image_size < 8) throw ConfigError("data.image_size must be >= 8");
    if (*d.train_per_class < 1 || *d.test_per_class < 2) {
      throw ConfigError("data needs >= 1 training and >= 2 test examples per class");
    }
  } else if (d.source == "idx") {
    d.train_images = f.get<std::string>("train_images", "train-images-idx3-ubyte.gz");
    d.train_labels = f.get<std::string>("train_labels", "train-labels-idx1-ubyte.gz");
    d.test_images = f.get<std::string>("test_images", "t10k-images-idx3-ubyte.gz");
    d.test_labels = f.get<std::string>("test_labels", "t10k-labels-idx1-ubyte.gz");
    d.train_per_class = f.maybe<std::size_t>("train_per_class");
    d.test_per_class = f.maybe<std::size_t>("test_per_class");
  } else {
    throw ConfigError("data.source must be \"synthetic\" or \"idx\"");
  }
  f.finish();
  canonical = f.out;
  return d;
}

struct Splits {
  Dataset train;
  Dataset test;
};

Splits load_data(const DataConfig& d, const Context& ctx) {
  if (d.source == "synthetic") {
    return {synth_digits(*d.train_per_class, d.classes, d.image_size, derive_seed(ctx.seed, "data/train"), "train"),
            synth_digits(*d.test_per_class, d.classes, d.image_size, derive_seed(ctx.seed, "data/test"), "test")};
  }
  const auto load = [&](const std::string& images, const std::string& labels, const std::string& split,
                        const std::optional<std::size_t>& per_class) {
    const fs::path ip = ctx.data_file(images), lp = ctx.data_file(labels);
    require_file(ip);
    require_file(lp);
    Dataset ds = load_idx(ip, lp, split);
    return per_class ? take_per_class(ds, *per_class, split) : ds;
  };
  return {load(d.train_images, d.train_labels, "train", d.train_per_class),
          load(d.test_images, d.test_labels, "test", d.test_per_class)};
}

// ---------------------------------------------------------------- models

json train_json(const TrainConfig& cfg, bool seed_given) {
  json j = train_config_to_json(cfg);
  if (!seed_given) j.erase("seed");
  return j;
}

TrainConfig parse_train(const json& j, bool& seed_given, json& canonical) {
  seed_given = j.is_object() && j.contains("seed");
  TrainConfig cfg = train_config_from_json(j);
  canonical = train_json(cfg, seed_given);
  return cfg;
}

AttackSpec parse_attack(const json& j, bool& seed_given, json& canonical) {
  seed_given = j.is_object() && j.contains("seed");
  AttackSpec spec = attack_spec_from_json(j);
  canonical = attack_spec_to_json(spec);
  if (!seed_given) canonical.erase("seed");
  return spec;
}

struct ModelConfig {
  std::string name;
  std::optional<std::string> checkpoint;
  std::string preset = "net-a";
  HeadKind head = HeadKind::one_hot_ce;
  std::size_t l = 2000;
  std::optional<double> beta;
  std::optional<std::string> codebook_file;
  std::optional<std::uint64_t> codebook_seed;
  std::optional<std::uint64_t> init_seed;
  TrainConfig train;
  bool train_seed_given = false;
};

ModelConfig parse_model(const json& j, const std::string& where, json& canonical) {
  Fields f(j, where);
  ModelConfig m;
  m.name = f.need<std::string>("name");
  if (m.name.empty()) throw ConfigError(where + ".name must not be empty");
  m.checkpoint = f.maybe<std::string>("checkpoint");
  if (!m.checkpoint) {
    m.preset = f.get<std::string>("preset", "net-a");
    m.head = parse_head_kind(f.get<std::string>("head", "one_hot_ce"));
    const bool codebook = m.head == HeadKind::codebook_mse || m.head == HeadKind::codebook_softmax;
    if (codebook) {
      m.codebook_file = f.maybe<std::string>("codebook");
      if (!m.codebook_file) {
        m.l = f.get<std::size_t>("l", 2000);
        m.beta = f.maybe<double>("beta");
        m.codebook_seed = f.maybe<std::uint64_t>("codebook_seed");
      }
    }
    m.init_seed = f.maybe<std::uint64_t>("init_seed");
    json train_canon;
    m.train = parse_train(f.has("train") ? f.sub("train") : json::object(), m.train_seed_given, train_canon);
    f.out["train"] = train_canon;
  }
  f.finish();
  canonical = f.out;
  return m;
}

std::vector<ModelConfig> parse_models(Fields& f, const std::string& key, std::size_t min_count) {
  const json& arr = f.sub(key);
  if (!arr.is_array()) throw ConfigError(f.path(key) + " must be an array");
  if (arr.size() < min_count) {
    throw ConfigError(f.path(key) + " needs at least " + std::to_string(min_count) + " entries");
  }
  std::vector<ModelConfig> models;
  json canon = json::array();
  std::set<std::string> names;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    json c;
    models.push_back(parse_model(arr[i], f.path(key) + "[" + std::to_string(i) + "]", c));
    if (!names.insert(models.back().name).second) {
      throw ConfigError(f.path(key) + ": duplicate model name '" + models.back().name + "'");
    }
    canon.push_back(c);
  }
  f.out[key] = canon;
  return models;
}

Codebook model_codebook(const ModelConfig& m, std::size_t k, const Context& ctx) {
  if (m.codebook_file) {
    const fs::path p = ctx.config_file(*m.codebook_file);
    require_file(p);
    Codebook cb = load_codebook(p);
    if (cb.k != k) throw ContractError("codebook class count does not match the dataset");
    return cb;
  }
  return generate_codebook(k, m.l, m.beta, m.codebook_seed.value_or(derive_seed(ctx.seed, "codebook")));
}

Model build_model(const ModelConfig& m, const Dataset& train_set, const Context& ctx) {
  if (m.checkpoint) {
    const fs::path p = ctx.config_file(*m.checkpoint);
    require_file(p);
    Model model = load_model(p);
    if (model.arch.input_shape != train_set.example_shape()) {
      throw ShapeError("checkpoint " + p.string() + " does not match the dataset input shape");
    }
    return model;
  }
  const std::size_t k = train_set.classes;
  Head head;
  switch (m.head) {
    case HeadKind::one_hot_ce: head = Head::one_hot_ce(k); break;
    case HeadKind::one_hot_mse: head = Head::one_hot_mse(k); break;
    case HeadKind::codebook_mse: head = Head::codebook_mse(model_codebook(m, k, ctx)); break;
    case HeadKind::codebook_softmax: head = Head::codebook_softmax(model_codebook(m, k, ctx)); break;
  }
  Model model = make_model(preset_architecture(m.preset, train_set.example_shape(), head.width()), head,
                           m.init_seed.value_or(derive_seed(ctx.seed, "model/" + m.name)));
  TrainConfig cfg = m.train;
  if (!m.train_seed_given) cfg.seed = derive_seed(ctx.seed, "train/" + m.name);
  if (cfg.epochs == 0) return model;
  std::ofstream metrics(ctx.out("metrics-" + m.name + ".jsonl"), std::ios::binary);
  return train(std::move(model), train_set, cfg, nullptr, &metrics).model;
}

std::vector<NamedModel> build_models(const std::vector<ModelConfig>& configs, const Dataset& train_set,
                                     const Context& ctx) {
  std::vector<NamedModel> out;
  for (const ModelConfig& c : configs) out.push_back({c.name, build_model(c, train_set, ctx)});
  return out;
}

AttackSpec seeded(AttackSpec spec, bool seed_given, const Context& ctx, const std::string& component) {
  if (!seed_given) spec.seed = derive_seed(ctx.seed, component);
  return spec;
}

// ---------------------------------------------------------------- commands

struct Command {
  json canonical;
  std::function<json(const Context&)> run;
};

std::uint64_t master_seed(Fields& f, std::optional<std::uint64_t> override_seed) {
  std::uint64_t seed = f.get<std::uint64_t>("seed", 0);
  if (override_seed) {
    seed = *override_seed;
    f.out["seed"] = seed;
  }
  return seed;
}

DataConfig data_field(Fields& f) {
  json canon;
  DataConfig d = parse_data(f.has("data") ? f.sub("data") : json::object(), canon);
  f.out["data"] = canon;
  return d;
}

Command cmd_codebook(Fields& f) {
  const std::size_t k = f.get<std::size_t>("k", 10);
  const std::size_t l = f.get<std::size_t>("l", 2000);
  const std::optional<double> beta = f.maybe<double>("beta");
  return {f.out, [=](const Context& ctx) {
            const Codebook cb = generate_codebook(k, l, beta, ctx.seed);
            validate_codebook(cb);
            double max_dot = 0.0, max_norm_err = 0.0;
            for (std::size_t i = 0; i < k; ++i) {
              const auto ri = cb.row(i);
              double norm = 0.0;
              for (double v : ri) norm += v * v;
              max_norm_err = std::max(max_norm_err, std::abs(std::sqrt(norm) - cb.beta) / cb.beta);
              for (std::size_t j = i + 1; j < k; ++j) {
                const auto rj = cb.row(j);
                double dot = 0.0;
                for (std::size_t p = 0; p < l; ++p) dot += ri[p] * rj[p];
                max_dot = std::max(max_dot, std::abs(dot) / (cb.beta * cb.beta));
              }
            }
            save_codebook(cb, ctx.out("codebook.rocb"));
            json r = codebook_to_json(cb);
            r.erase("rows");
            r["file"] = "codebook.rocb";
            r["max_relative_dot"] = max_dot;
            r["max_relative_norm_error"] = max_norm_err;
            r["valid"] = true;
            return r;
          }};
}

Command cmd_train(Fields& f) {
  const DataConfig data = data_field(f);
  json mc;
  const ModelConfig model = parse_model(f.has("model") ? f.sub("model") : json::object(), "model", mc);
  f.out["model"] = mc;
  if (model.checkpoint) throw ConfigError("model: train needs an architecture, not a checkpoint");
  return {f.out, [=](const Context& ctx) {
            const Splits s = load_data(data, ctx);
            TrainConfig cfg = model.train;
            if (!model.train_seed_given) cfg.seed = derive_seed(ctx.seed, "train/" + model.name);
            ModelConfig untrained = model;
            untrained.train.epochs = 0;
            Model m = build_model(untrained, s.train, ctx);
            std::ofstream metrics(ctx.out("metrics.jsonl"), std::ios::binary);
            TrainResult result = train(std::move(m), s.train, cfg, &s.test, &metrics);
            save_model(result.model, ctx.out("model.romd"));
            json history = json::array();
            for (const EpochMetrics& e : result.history) history.push_back(epoch_metrics_to_json(e));
            std::size_t params = 0;
            for (const Tensor& p : result.model.params) params += p.size();
            return json{{"name", model.name},
                        {"checkpoint", "model.romd"},
                        {"metrics", "metrics.jsonl"},
                        {"parameters", params},
                        {"head", head_to_json(result.model.head)},
                        {"history", history},
                        {"train_accuracy", accuracy(result.model, s.train.images, s.train.labels)},
                        {"test_accuracy", accuracy(result.model, s.test.images, s.test.labels)}};
          }};
}

json attack_outcome(const Model& target, const Dataset& test, const Tensor& adversarial) {
  const double acc = evaluate_attack(target, test.images, test.labels, adversarial);
  double linf = 0.0;
  for (std::size_t i = 0; i < adversarial.size(); ++i) {
    linf = std::max(linf, std::abs(adversarial[i] - test.images[i]));
  }
  return {{"accuracy", acc}, {"success_rate", 1.0 - acc}, {"max_linf", linf}};
}

Command cmd_attack(Fields& f) {
  const DataConfig data = data_field(f);
  const std::vector<ModelConfig> targets = parse_models(f, "targets", 1);
  std::optional<ModelConfig> substitute;
  if (f.has("substitute")) {
    json c;
    substitute = parse_model(f.sub("substitute"), "substitute", c);
    f.out["substitute"] = c;
  }
  bool seed_given = false;
  json ac;
  const AttackSpec attack = parse_attack(f.sub("attack"), seed_given, ac);
  f.out["attack"] = ac;
  const auto epsilons = f.maybe<std::vector<double>>("epsilons");
  if (epsilons) {
    for (double e : *epsilons) {
      if (!(e >= 0.0)) throw ConfigError("epsilons must be >= 0");
    }
  }
  return {f.out, [=](const Context& ctx) {
            const Splits s = load_data(data, ctx);
            const AttackSpec spec = seeded(attack, seed_given, ctx, "attack");
            std::optional<Tensor> black;
            std::string substitute_name;
            if (substitute) {
              const Model sub = build_model(*substitute, s.train, ctx);
              black = generate_attack(sub, s.test.images, s.test.labels, spec);
              substitute_name = substitute->name;
            }
            json rows = json::array();
            for (const NamedModel& t : build_models(targets, s.train, ctx)) {
              json row{{"name", t.name},
                       {"clean_accuracy", accuracy(t.model, s.test.images, s.test.labels)},
                       {"white_box", attack_outcome(t.model, s.test,
                                                    generate_attack(t.model, s.test.images, s.test.labels, spec))}};
              if (black) {
                row["black_box"] = attack_outcome(t.model, s.test, *black);
                row["black_box"]["substitute"] = substitute_name;
              }
              if (epsilons) {
                json curve = json::array();
                for (double e : *epsilons) {
                  AttackSpec at = spec;
                  at.epsilon = e;
                  json point = attack_outcome(t.model, s.test, generate_attack(t.model, s.test.images, s.test.labels, at));
                  point["epsilon"] = e;
                  curve.push_back(point);
                }
                row["epsilon_curve"] = curve;
              }
              rows.push_back(row);
            }
            return json{{"examples", s.test.size()}, {"targets", rows}};
          }};
}

Command cmd_matrix(Fields& f) {
  const DataConfig data = data_field(f);
  const std::vector<ModelConfig> models = parse_models(f, "models", 2);
  bool seed_given = false;
  json ac;
  const AttackSpec attack = parse_attack(f.sub("attack"), seed_given, ac);
  f.out["attack"] = ac;
  const auto layers = f.get<std::vector<std::string>>("layers", {"input"});
  return {f.out, [=](const Context& ctx) {
            const Splits s = load_data(data, ctx);
            const std::vector<NamedModel> named = build_models(models, s.train, ctx);
            const TransferMatrix m =
                attack_transfer_matrix(named, seeded(attack, seed_given, ctx, "attack"), s.test);
            const std::string csv = transfer_matrix_csv(m);
            write_text(ctx.out("matrix.csv"), csv);
            json mj = transfer_matrix_json(m);
            write_text(ctx.out("matrix.json"), mj.dump(2) + "\n");

            json correlations = json::object();
            for (const std::string& layer : layers) {
              std::vector<GradientRecord> records;
              for (const NamedModel& nm : named) records.push_back(sign_gradient_record(nm.model, s.test, layer, nm.name));
              json rho = json::array();
              for (const GradientRecord& g : records) {
                json row = json::array();
                for (const GradientRecord& r : records) {
                  const auto v = pearson_sign_correlation(g, r);
                  row.push_back(v ? json(*v) : json(nullptr));
                }
                rho.push_back(row);
              }
              correlations[layer] = rho;
            }
            mj["correlations"] = correlations;
            mj["files"] = {"matrix.csv", "matrix.json"};
            mj["examples"] = s.test.size();
            return mj;
          }};
}

Command cmd_sweep(Fields& f) {
  const DataConfig data = data_field(f);
  const std::string preset = f.get<std::string>("preset", "net-a");
  const auto l_values = f.need<std::vector<std::size_t>>("l_values");
  if (l_values.empty()) throw ConfigError("l_values must not be empty");
  const std::optional<double> beta = f.maybe<double>("beta");
  bool train_seed_given = false, attack_seed_given = false;
  json tc, ac, sc;
  const TrainConfig train_cfg = parse_train(f.has("train") ? f.sub("train") : json::object(), train_seed_given, tc);
  f.out["train"] = tc;
  const AttackSpec attack = parse_attack(f.sub("attack"), attack_seed_given, ac);
  f.out["attack"] = ac;
  const ModelConfig substitute = parse_model(f.sub("substitute"), "substitute", sc);
  f.out["substitute"] = sc;
  return {f.out, [=](const Context& ctx) {
            const Splits s = load_data(data, ctx);
            SweepTemplate tmpl;
            tmpl.preset = preset;
            tmpl.train = train_cfg;
            if (!train_seed_given) tmpl.train.seed = derive_seed(ctx.seed, "train/sweep");
            tmpl.beta = beta;
            tmpl.seed = derive_seed(ctx.seed, "sweep");
            const Model sub = build_model(substitute, s.train, ctx);
            const std::vector<SweepRow> rows = dimension_sweep(
                l_values, tmpl, s.train, s.test, seeded(attack, attack_seed_given, ctx, "attack"), sub);
            write_text(ctx.out("sweep.csv"), sweep_csv(rows));
            json out = json::array();
            for (const SweepRow& r : rows) {
              out.push_back({{"l", r.l}, {"clean", r.clean}, {"white_box", r.white_box}, {"black_box", r.black_box}});
            }
            return json{{"rows", out}, {"file", "sweep.csv"}, {"examples", s.test.size()}};
          }};
}

Command cmd_landscape(Fields& f) {
  const DataConfig data = data_field(f);
  json mc;
  const ModelConfig model = parse_model(f.sub("model"), "model", mc);
  f.out["model"] = mc;
  const std::size_t index = f.get<std::size_t>("index", 0);
  const double extent = f.get<double>("extent", 0.3);
  const std::size_t resolution = f.get<std::size_t>("resolution", 21);
  const std::optional<std::uint64_t> direction_seed = f.maybe<std::uint64_t>("direction_seed");
  if (resolution % 2 == 0 || resolution == 0) throw ConfigError("resolution must be odd");
  if (!(extent >= 0.0)) throw ConfigError("extent must be >= 0");
  return {f.out, [=](const Context& ctx) {
            const Splits s = load_data(data, ctx);
            if (index >= s.test.size()) throw ContractError("landscape index is outside the test split");
            const Model m = build_model(model, s.train, ctx);
            const Tensor x = s.test.images.slice_rows(index, index + 1).reshaped(s.test.example_shape());
            const std::size_t label = s.test.labels[index];
            const LandscapeGrid g = loss_landscape(m, x, label, extent, resolution,
                                                   direction_seed.value_or(derive_seed(ctx.seed, "landscape")));
            write_text(ctx.out("landscape.csv"), landscape_csv(g));
            const auto [lo, hi] = std::minmax_element(g.z.data().begin(), g.z.data().end());
            return json{{"index", index},
                        {"label", label},
                        {"quantity", m.head.uses_codebook() ? "mse_loss" : "ground_truth_logit"},
                        {"base", g.base},
                        {"min", *lo},
                        {"max", *hi},
                        {"extent", extent},
                        {"resolution", resolution},
                        {"file", "landscape.csv"}};
          }};
}

Command cmd_corrupt_eval(Fields& f) {
  const DataConfig data = data_field(f);
  const std::vector<ModelConfig> models = parse_models(f, "models", 1);
  std::vector<std::string> names;
  for (CorruptionKind k : all_corruptions()) names.push_back(corruption_name(k));
  names = f.get<std::vector<std::string>>("corruptions", names);
  std::vector<CorruptionKind> kinds;
  for (const std::string& n : names) kinds.push_back(parse_corruption(n));
  const auto severities = f.get<std::vector<std::size_t>>("severities", {1, 2, 3, 4, 5});
  for (std::size_t s : severities) {
    if (s < 1 || s > 5) throw ConfigError("severities must lie in 1..5");
  }
  if (kinds.empty() || severities.empty()) throw ConfigError("corruptions and severities must not be empty");
  return {f.out, [=](const Context& ctx) {
            const Splits s = load_data(data, ctx);
            const std::vector<NamedModel> named = build_models(models, s.train, ctx);
            std::ostringstream csv;
            csv << "model,corruption,severity,accuracy\n";
            json rows = json::array();
            std::vector<json> per_model(named.size(), json::object());
            std::vector<double> sums(named.size(), 0.0);
            for (CorruptionKind kind : kinds) {
              for (std::size_t sev : severities) {
                const Dataset c = corrupt(s.test, {kind, static_cast<int>(sev),
                                                   derive_seed(derive_seed(ctx.seed, "corrupt/" + corruption_name(kind)), sev)});
                for (std::size_t i = 0; i < named.size(); ++i) {
                  const double acc = accuracy(named[i].model, c.images, c.labels);
                  per_model[i][corruption_name(kind)].push_back(acc);
                  sums[i] += acc;
                  char buf[32];
                  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * acc);
                  csv << named[i].name << ',' << corruption_name(kind) << ',' << sev << ',' << buf << '\n';
                }
              }
            }
            const double cells = static_cast<double>(kinds.size() * severities.size());
            for (std::size_t i = 0; i < named.size(); ++i) {
              rows.push_back({{"name", named[i].name},
                              {"clean", accuracy(named[i].model, s.test.images, s.test.labels)},
                              {"corruptions", per_model[i]},
                              {"mean", sums[i] / cells}});
            }
            write_text(ctx.out("corruption.csv"), csv.str());
            return json{{"models", rows}, {"severities", severities}, {"file", "corruption.csv"}};
          }};
}

Corner parse_corner(const std::string& s) {
  if (s == "top-left") return Corner::top_left;
  if (s == "top-right") return Corner::top_right;
  if (s == "bottom-left") return Corner::bottom_left;
  if (s == "bottom-right") return Corner::bottom_right;
  throw ConfigError("unknown watermark corner '" + s + "'");
}

Command cmd_watermark(Fields& f) {
  const DataConfig data = data_field(f);
  const std::string preset = f.get<std::string>("preset", "net-b");
  const std::size_t l = f.get<std::size_t>("l", 2000);
  const std::optional<double> beta = f.maybe<double>("beta");

  WatermarkSpec wm;
  {
    Fields w(f.has("watermark") ? f.sub("watermark") : json::object(), "watermark");
    wm.patch = w.get<std::size_t>("patch", 4);
    wm.corner = parse_corner(w.get<std::string>("corner", "top-left"));
    wm.value = w.get<double>("value", 1.0);
    wm.source = w.get<std::size_t>("source", 0);
    wm.target = w.get<std::size_t>("target", 1);
    wm.fraction = w.get<double>("fraction", 0.5);
    w.finish();
    if (wm.source == wm.target) throw ConfigError("watermark source and target must differ");
    if (!(wm.fraction > 0.0 && wm.fraction <= 1.0)) throw ConfigError("watermark fraction must be in (0, 1]");
    if (!(wm.value >= 0.0 && wm.value <= 1.0)) throw ConfigError("watermark value must be in [0, 1]");
    if (wm.patch < 1) throw ConfigError("watermark patch must be >= 1");
    f.out["watermark"] = w.out;
  }
  const auto train_field = [&](const std::string& key, TrainConfig fallback) {
    bool given = false;
    json canon;
    json src = train_config_to_json(fallback);
    src.erase("seed");
    if (f.has(key)) src = f.sub(key);
    TrainConfig cfg = parse_train(src, given, canon);
    f.out[key] = canon;
    return std::pair{cfg, given};
  };
  TrainConfig ro_default;
  ro_default.freeze_features = true;
  ro_default.lr = 0.02;
  ro_default.momentum = 0.5;
  ro_default.epochs = 60;
  const auto stolen = train_field("stolen", TrainConfig{});
  const auto ft = train_field("finetune", TrainConfig{});
  const auto ft_ro = train_field("finetune_ro", ro_default);

  return {f.out, [=](const Context& ctx) {
            const Splits s = load_data(data, ctx);
            if (wm.source >= s.train.classes || wm.target >= s.train.classes) {
              throw ContractError("watermark classes exceed the dataset's class count");
            }
            WatermarkSpec spec = wm;
            spec.seed = derive_seed(ctx.seed, "watermark");
            const Watermarked marked = stamp_watermark(s.train, spec);

            const std::size_t half = s.test.size() / 2;
            std::vector<std::size_t> first, second;
            for (std::size_t i = 0; i < s.test.size(); ++i) (i < half ? first : second).push_back(i);
            const Dataset tune = subset(s.test, first, "finetune");
            const Dataset eval = subset(s.test, second, "eval");

            const auto seeded_cfg = [&](const std::pair<TrainConfig, bool>& c, const std::string& name) {
              TrainConfig cfg = c.first;
              if (!c.second) cfg.seed = derive_seed(ctx.seed, "train/" + name);
              return cfg;
            };
            const auto fit = [&](Model m, const Dataset& ds, TrainConfig cfg, const std::string& name) {
              std::ofstream metrics(ctx.out("metrics-" + name + ".jsonl"), std::ios::binary);
              return train(std::move(m), ds, cfg, nullptr, &metrics).model;
            };
            const std::size_t k = s.train.classes;
            const Shape shape = s.train.example_shape();
            const Codebook cb = generate_codebook(k, l, beta, derive_seed(ctx.seed, "codebook"));
            const Head one_hot = Head::one_hot_ce(k);
            const Head ro = Head::codebook_mse(cb);

            std::vector<std::pair<std::string, Model>> models;
            const Model stolen_model = fit(make_model(preset_architecture(preset, shape, k), one_hot,
                                                      derive_seed(ctx.seed, "model/stolen")),
                                           marked.marked, seeded_cfg(stolen, "stolen"), "stolen");
            models.emplace_back("stolen", stolen_model);

            TrainConfig scratch_ro = seeded_cfg(ft_ro, "scratch-RO");
            scratch_ro.freeze_features = false;
            TrainConfig scratch_1ofk = seeded_cfg(ft, "scratch-1ofK");
            scratch_1ofk.freeze_features = false;
            models.emplace_back("scratch-1ofK",
                                fit(make_model(preset_architecture(preset, shape, k), one_hot,
                                               derive_seed(ctx.seed, "model/scratch-1ofK")),
                                    tune, scratch_1ofk, "scratch-1ofK"));
            models.emplace_back("scratch-RO",
                                fit(make_model(preset_architecture(preset, shape, l), ro,
                                               derive_seed(ctx.seed, "model/scratch-RO")),
                                    tune, scratch_ro, "scratch-RO"));
            const TrainConfig ft_cfg = seeded_cfg(ft, "finetune-1ofK");
            models.emplace_back("finetune-1ofK", fit(swap_head(stolen_model, one_hot, derive_seed(ft_cfg.seed, "head")),
                                                     tune, ft_cfg, "finetune-1ofK"));
            const TrainConfig ft_ro_cfg = seeded_cfg(ft_ro, "finetune-RO");
            models.emplace_back("finetune-RO", fit(swap_head(stolen_model, ro, derive_seed(ft_ro_cfg.seed, "head")),
                                                   tune, ft_ro_cfg, "finetune-RO"));

            std::ostringstream csv;
            csv << "model,test_accuracy,watermark_accuracy\n";
            json rows = json::array();
            for (const auto& [name, m] : models) {
              const double test_acc = accuracy(m, eval.images, eval.labels);
              const double wm_acc = accuracy(m, marked.trigger.images, marked.trigger.labels);
              rows.push_back({{"model", name}, {"test_accuracy", test_acc}, {"watermark_accuracy", wm_acc}});
              char buf[64];
              std::snprintf(buf, sizeof buf, "%.2f,%.2f", 100.0 * test_acc, 100.0 * wm_acc);
              csv << name << ',' << buf << '\n';
            }
            write_text(ctx.out("watermark.csv"), csv.str());
            return json{{"rows", rows},
                        {"trigger_size", marked.trigger.size()},
                        {"finetune_size", tune.size()},
                        {"eval_size", eval.size()},
                        {"file", "watermark.csv"}};
          }};
}

Command parse_command(const std::string& command, const json& config, std::optional<std::uint64_t> seed_override,
                      std::uint64_t& seed) {
  Fields f(config, "config");
  seed = master_seed(f, seed_override);
  Command c;
  if (command == "codebook") c = cmd_codebook(f);
  else if (command == "train") c = cmd_train(f);
  else if (command == "attack") c = cmd_attack(f);
  else if (command == "matrix") c = cmd_matrix(f);
  else if (command == "sweep") c = cmd_sweep(f);
  else if (command == "landscape") c = cmd_landscape(f);
  else if (command == "corrupt_eval") c = cmd_corrupt_eval(f);
  else if (command == "watermark") c = cmd_watermark(f);
  else throw ConfigError("unknown command '" + command + "'");
  f.finish();
  c.canonical = f.out;
  return c;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"codebook", "train",        "attack",       "matrix",
                                              "sweep",    "landscape",    "corrupt_eval", "watermark"};
  return names;
}

json canonical_config(const std::string& command, const json& config, std::optional<std::uint64_t> seed_override) {
  std::uint64_t seed = 0;
  return parse_command(command, config, seed_override, seed).canonical;
}

std::string config_hash(const std::string& command, const json& canonical) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(command + "\n" + canonical.dump())));
  return buf;
}

json run_command(const std::string& command, const json& config, const RunOptions& opts) {
  Context ctx;
  ctx.opts = opts;
  const Command c = parse_command(command, config, opts.seed, ctx.seed);
  fs::create_directories(opts.out_dir);
  json report{{"tool", "roboenc"},
              {"format", 1},
              {"status", "ok"},
              {"command", command},
              {"config", c.canonical},
              {"config_hash", config_hash(command, c.canonical)},
              {"results", c.run(ctx)}};
  if (opts.timestamp) report["timestamp"] = utc_timestamp();
  write_text(ctx.out("report.json"), report.dump(2) + "\n");
  return report;
}

json error_report(const std::string& command, const std::string& kind, const std::string& message, int exit_code) {
  return {{"tool", "roboenc"},
          {"format", 1},
          {"status", "error"},
          {"command", command},
          {"exit_code", exit_code},
          {"error", {{"kind", kind}, {"message", message}}}};
}

}  // namespace roboenc
