#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roboenc/network.hpp"

namespace roboenc {

enum class AttackFamily { fgsm, pgd, random_search };
enum class AttackObjective { head_loss, cw_margin };

struct AttackSpec {
  AttackFamily family = AttackFamily::fgsm;
  double epsilon = 0.0;
  std::optional<double> step;  // PGD step; defaults to 2.5 * epsilon / iters
  std::size_t iters = 1;
  std::size_t restarts = 1;
  bool random_start = true;
  AttackObjective objective = AttackObjective::head_loss;
  double kappa = 0.0;
  std::optional<std::size_t> target;  // targeted attack class
  std::size_t trials = 100;           // random-search samples per example
  std::uint64_t seed = 0;

  double step_size() const;
  void validate() const;
  friend bool operator==(const AttackSpec&, const AttackSpec&) = default;
};

nlohmann::json attack_spec_to_json(const AttackSpec& spec);
// Missing fields take their defaults; bad values throw ConfigError.
AttackSpec attack_spec_from_json(const nlohmann::json& j);

// Quantity the attacker maximizes, per example, and its input gradient
// (gradient of the batch sum). Untargeted head loss: the loss at the label.
// Targeted: minus the loss at the target. CW margin: minus the clamped margin.
struct ObjectiveGradient {
  Tensor grad;
  std::vector<double> value;
};
ObjectiveGradient attack_objective(const Model& model, const Tensor& x,
                                   std::span<const std::size_t> labels, const AttackSpec& spec);

// max(min_{i != t} d_i - d_t, -kappa) for precomputed distances.
double cw_margin_from_distances(std::span<const double> d, std::size_t t, double kappa);
// Same with d_i the MSE between the model output at x and codebook row i.
double cw_margin(const Model& model, const Tensor& x, std::size_t t, double kappa);

// clamp01(x + epsilon * sign(grad of the loss at t)); x may be one example or a batch.
Tensor fgsm(const Model& model, const Tensor& x, std::span<const std::size_t> labels, double epsilon);
Tensor fgsm(const Model& model, const Tensor& x, std::size_t t, double epsilon);

// Iterated signed steps, each projected onto the epsilon box around x and then
// onto [0, 1]. Across restarts the candidate with the largest objective wins.
// Random starts for example i draw from derive_seed(spec.seed, i).
Tensor pgd(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
           const AttackSpec& spec);

// Dispatches on spec.family (random search returns x where no flip is found).
Tensor generate_attack(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                       const AttackSpec& spec);

// Uniform sign-vector sampling; the first perturbation that changes the
// predicted class, if any.
std::optional<Tensor> random_search_probe(const Model& model, const Tensor& x, double epsilon,
                                          std::size_t trials, std::uint64_t seed);

// Fraction of adversarial inputs still classified as their label.
double evaluate_attack(const Model& target, const Tensor& examples,
                       std::span<const std::size_t> labels, const Tensor& adversarial);

}  // namespace roboenc
