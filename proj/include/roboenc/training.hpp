#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "roboenc/attacks.hpp"
#include "roboenc/data.hpp"
#include "roboenc/network.hpp"

namespace roboenc {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.5;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lambda = 1.0;                     // clean-loss weight in adversarial training
  std::optional<AttackSpec> adversarial;   // inner maximization, recomputed every batch
  bool freeze_features = false;            // conv layers receive no updates
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_acc = 0.0;
  std::optional<double> val_acc;
  double clean_loss = 0.0;
  std::optional<double> adv_loss;
};
nlohmann::json epoch_metrics_to_json(const EpochMetrics& m);

struct TrainResult {
  Model model;
  std::vector<EpochMetrics> history;
};

// v <- momentum * v + g; w <- w - lr * v.
void sgd_step(Tensor& weight, const Tensor& grad, Tensor& velocity, double lr, double momentum);

// Loss terms and parameter gradients for one batch. With x_adv the objective
// is L(x_adv) + lambda * L(x); without it, L(x). Both terms share the dropout
// masks drawn from `dropout_seed`. Gradients of frozen tensors are zero.
struct BatchObjective {
  std::vector<Tensor> grads;
  double clean_loss = 0.0;
  std::optional<double> adv_loss;
};
BatchObjective batch_objective(const Model& model, const Tensor& x, const Tensor* x_adv,
                               std::span<const std::size_t> labels, double lambda,
                               std::uint64_t dropout_seed, const std::vector<bool>& frozen = {});

// Which parameter tensors stay fixed under cfg.freeze_features.
std::vector<bool> frozen_params(const Model& model, bool freeze_features);

// Seeded shuffling, dropout and (when cfg.adversarial is set) per-batch PGD.
// Optional JSON-lines metrics go to `metrics`. Throws TrainingDiverged.
TrainResult train(Model model, const Dataset& data, const TrainConfig& cfg,
                  const Dataset* validation = nullptr, std::ostream* metrics = nullptr);
TrainResult adversarial_train(Model model, const Dataset& data, const TrainConfig& cfg,
                              const Dataset* validation = nullptr, std::ostream* metrics = nullptr);

// Keeps every layer but the last, swaps in `new_head` with a freshly drawn
// final dense layer of matching width, then trains.
Model swap_head(const Model& stolen, const Head& new_head, std::uint64_t seed);
TrainResult finetune_with_head_swap(const Model& stolen, const Head& new_head, const Dataset& data,
                                    const TrainConfig& cfg, const Dataset* validation = nullptr,
                                    std::ostream* metrics = nullptr);

}  // namespace roboenc
