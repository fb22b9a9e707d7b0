#include "roboenc/training.hpp"

#include <cmath>
#include <numeric>

#include "roboenc/errors.hpp"
#include "roboenc/rng.hpp"

namespace roboenc {

namespace {

constexpr double kDivergenceLoss = 1e6;

Tensor gather(const Tensor& images, std::span<const std::size_t> idx) {
  const std::size_t stride = images.size() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = idx.size();
  Tensor out(shape);
  auto dst = out.data().begin();
  for (std::size_t i : idx) {
    auto src = images.data().subspan(i * stride, stride);
    dst = std::copy(src.begin(), src.end(), dst);
  }
  return out;
}

nlohmann::json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train momentum must be in [0, 1)");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("train lambda must be >= 0");
  if (batch_size < 1) throw ConfigError("train batch_size must be >= 1");
  if (adversarial) adversarial->validate();
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j{{"lr", cfg.lr},         {"momentum", cfg.momentum},
                   {"epochs", cfg.epochs}, {"batch_size", cfg.batch_size},
                   {"lambda", cfg.lambda}, {"freeze_features", cfg.freeze_features},
                   {"seed", cfg.seed}};
  if (cfg.adversarial) j["adversarial"] = attack_spec_to_json(*cfg.adversarial);
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const std::vector<std::string> known{"lr",     "momentum",    "epochs",          "batch_size",
                                              "lambda", "adversarial", "freeze_features", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown train field '" + key + "'");
    }
  }
  TrainConfig cfg;
  try {
    cfg.lr = j.value("lr", cfg.lr);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.lambda = j.value("lambda", cfg.lambda);
    cfg.freeze_features = j.value("freeze_features", cfg.freeze_features);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  if (j.contains("adversarial") && !j.at("adversarial").is_null()) {
    cfg.adversarial = attack_spec_from_json(j.at("adversarial"));
  }
  cfg.validate();
  return cfg;
}

nlohmann::json epoch_metrics_to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"train_acc", m.train_acc},
          {"val_acc", optional_number(m.val_acc)},
          {"clean_loss", m.clean_loss},
          {"adv_loss", optional_number(m.adv_loss)}};
}

void sgd_step(Tensor& weight, const Tensor& grad, Tensor& velocity, double lr, double momentum) {
  if (weight.shape() != grad.shape() || weight.shape() != velocity.shape()) {
    throw ContractError("sgd_step: weight, gradient and velocity shapes differ");
  }
  for (std::size_t i = 0; i < weight.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    weight[i] -= lr * velocity[i];
  }
}

std::vector<bool> frozen_params(const Model& model, bool freeze_features) {
  std::vector<bool> frozen(model.params.size(), false);
  if (!freeze_features) return frozen;
  const std::vector<std::size_t> offsets = param_offsets(model.arch);
  for (std::size_t i = 0; i < model.arch.layers.size(); ++i) {
    if (std::holds_alternative<Conv2d>(model.arch.layers[i])) {
      frozen[offsets[i]] = true;
      frozen[offsets[i] + 1] = true;
    }
  }
  return frozen;
}

BatchObjective batch_objective(const Model& model, const Tensor& x, const Tensor* x_adv,
                               std::span<const std::size_t> labels, double lambda,
                               std::uint64_t dropout_seed, const std::vector<bool>& frozen) {
  if (!frozen.empty() && frozen.size() != model.params.size()) {
    throw ContractError("frozen mask does not match the parameter list");
  }
  Tape tape;
  std::vector<Var> params;
  params.reserve(model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const bool fixed = !frozen.empty() && frozen[i];
    params.push_back(fixed ? tape.constant(model.params[i]) : tape.leaf(model.params[i]));
  }
  Var xv = tape.constant(x);
  Var clean = loss_on(model.head, forward_on(tape, model, params, xv, true, dropout_seed).output, labels);
  BatchObjective out;
  out.clean_loss = clean.value().item();
  Var root = clean;
  if (x_adv != nullptr) {
    if (x_adv->shape() != x.shape()) throw ShapeError("adversarial batch shape differs from clean batch");
    Var adv = loss_on(model.head,
                      forward_on(tape, model, params, tape.constant(*x_adv), true, dropout_seed).output, labels);
    out.adv_loss = adv.value().item();
    root = lambda == 0.0 ? adv : ad::add(adv, ad::scale(clean, lambda));
  }
  const Gradients g = tape.backward(root);
  out.grads.reserve(params.size());
  for (const Var& p : params) out.grads.push_back(g.of(p));
  return out;
}

TrainResult train(Model model, const Dataset& data, const TrainConfig& cfg, const Dataset* validation,
                  std::ostream* metrics) {
  cfg.validate();
  if (data.size() == 0) throw ContractError("training set is empty");
  validate_dataset(data);
  if (data.example_shape() != model.arch.input_shape) throw ShapeError("dataset does not match model input");

  const std::vector<bool> frozen = frozen_params(model, cfg.freeze_features);
  std::vector<Tensor> velocity;
  for (const Tensor& p : model.params) velocity.emplace_back(p.shape(), 0.0);

  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  const std::uint64_t dropout_root = derive_seed(cfg.seed, "dropout");
  const std::uint64_t attack_root = derive_seed(cfg.seed, "attack");
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::uint64_t step = 0;

  TrainResult result{std::move(model), {}};
  Model& m = result.model;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle_rng.below(i + 1)]);

    double clean_sum = 0.0, adv_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += cfg.batch_size, ++step, ++batches) {
      const std::span<const std::size_t> idx(order.data() + b, std::min(cfg.batch_size, n - b));
      const Tensor x = gather(data.images, idx);
      std::vector<std::size_t> labels;
      labels.reserve(idx.size());
      for (std::size_t i : idx) labels.push_back(data.labels[i]);

      BatchObjective obj;
      try {
        std::optional<Tensor> x_adv;
        if (cfg.adversarial) {
          AttackSpec spec = *cfg.adversarial;
          spec.seed = derive_seed(attack_root, step);
          x_adv = generate_attack(m, x, labels, spec);
        }
        obj = batch_objective(m, x, x_adv ? &*x_adv : nullptr, labels, cfg.lambda,
                              derive_seed(dropout_root, step), frozen);
      } catch (const NumericError& e) {
        throw TrainingDiverged(epoch, std::string("non-finite value during training: ") + e.what());
      }
      const double total = obj.clean_loss + obj.adv_loss.value_or(0.0);
      if (!std::isfinite(total) || total > kDivergenceLoss) {
        throw TrainingDiverged(epoch, "training loss diverged at epoch " + std::to_string(epoch));
      }
      clean_sum += obj.clean_loss;
      adv_sum += obj.adv_loss.value_or(0.0);
      for (std::size_t p = 0; p < m.params.size(); ++p) {
        if (!frozen[p]) sgd_step(m.params[p], obj.grads[p], velocity[p], cfg.lr, cfg.momentum);
      }
    }

    EpochMetrics em;
    em.epoch = epoch + 1;
    em.train_acc = accuracy(m, data.images, data.labels);
    if (validation != nullptr) em.val_acc = accuracy(m, validation->images, validation->labels);
    em.clean_loss = clean_sum / static_cast<double>(batches);
    if (cfg.adversarial) em.adv_loss = adv_sum / static_cast<double>(batches);
    if (metrics != nullptr) *metrics << epoch_metrics_to_json(em).dump() << '\n';
    result.history.push_back(em);
  }
  return result;
}

TrainResult adversarial_train(Model model, const Dataset& data, const TrainConfig& cfg,
                              const Dataset* validation, std::ostream* metrics) {
  if (!cfg.adversarial) throw ContractError("adversarial training needs an attack spec");
  return train(std::move(model), data, cfg, validation, metrics);
}

Model swap_head(const Model& stolen, const Head& new_head, std::uint64_t seed) {
  new_head.validate();
  if (new_head.kind != HeadKind::codebook_mse && new_head.kind != HeadKind::one_hot_ce) {
    throw ContractError("head swap supports codebook MSE and one-hot CE heads");
  }
  const auto& layers = stolen.arch.layers;
  if (layers.empty() || !std::holds_alternative<Dense>(layers.back())) {
    throw ContractError("head swap needs a final dense layer");
  }
  Architecture arch = stolen.arch;
  Dense& last = std::get<Dense>(arch.layers.back());
  last.out = new_head.width();
  Model swapped = make_model(std::move(arch), new_head, seed);
  if (swapped.params.size() != stolen.params.size()) throw ContractError("incompatible feature layers");
  for (std::size_t i = 0; i + 2 < stolen.params.size(); ++i) {
    if (swapped.params[i].shape() != stolen.params[i].shape()) throw ContractError("incompatible feature width");
    swapped.params[i] = stolen.params[i];
  }
  return swapped;
}

TrainResult finetune_with_head_swap(const Model& stolen, const Head& new_head, const Dataset& data,
                                    const TrainConfig& cfg, const Dataset* validation,
                                    std::ostream* metrics) {
  return train(swap_head(stolen, new_head, derive_seed(cfg.seed, "head")), data, cfg, validation, metrics);
}

}  // namespace roboenc
