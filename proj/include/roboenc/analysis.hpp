#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roboenc/attacks.hpp"
#include "roboenc/data.hpp"
#include "roboenc/training.hpp"

namespace roboenc {

// Sign of the loss gradient at a tagged activation for every example. Conv
// activations are averaged over channels before the sign, so `signs` is
// [N, H, W] for conv tags and [N, ...] otherwise.
struct GradientRecord {
  std::string model_id;
  std::string layer;
  Tensor signs;
};

GradientRecord sign_gradient_record(const Model& model, const Dataset& data, const std::string& layer,
                                    std::string model_id = {});
// Same with a gradient rescaling applied per example before the sign.
GradientRecord sign_gradient_record(const Model& model, const Dataset& data, const std::string& layer,
                                    std::span<const double> example_scale, std::string model_id = {});

// Pearson correlation of two equal-length vectors; nullopt when either is constant.
std::optional<double> pearson(std::span<const double> a, std::span<const double> b);
std::optional<double> pearson_sign_correlation(const GradientRecord& a, const GradientRecord& b);

struct NamedModel {
  std::string name;
  Model model;
};

// accuracy[g][f]: accuracy of target g on attacks crafted against source f.
// rho[g][f]: input-gradient sign correlation of g and f.
struct TransferMatrix {
  std::vector<std::string> names;
  std::vector<double> clean;
  std::vector<std::vector<double>> accuracy;
  std::vector<std::vector<std::optional<double>>> rho;
};

TransferMatrix attack_transfer_matrix(std::span<const NamedModel> models, const AttackSpec& attack,
                                      const Dataset& data);
// Percentages with a header row and row/column labels (rows are targets).
std::string transfer_matrix_csv(const TransferMatrix& m);
nlohmann::json transfer_matrix_json(const TransferMatrix& m);

struct LandscapeGrid {
  double extent = 0.0;
  std::size_t resolution = 0;
  Tensor r1;                 // sign of the input gradient at the center
  Tensor r2;                 // Rademacher direction
  std::vector<double> axis;  // offsets along each direction
  Tensor z;                  // [resolution, resolution], z[i][j] at axis[i] r1 + axis[j] r2
  double base = 0.0;         // quantity at the center
};

// MSE loss for codebook heads, ground-truth logit for one-hot heads, evaluated
// at clamp01(x + a r1 + b r2). The resolution must be odd.
LandscapeGrid loss_landscape(const Model& model, const Tensor& x, std::size_t t, double extent,
                             std::size_t resolution, std::uint64_t seed);
double landscape_quantity(const Model& model, const Tensor& x, std::size_t t);
std::string landscape_csv(const LandscapeGrid& grid);

struct SweepTemplate {
  std::string preset = "net-a";
  TrainConfig train;
  std::optional<double> beta;  // codebook scale, l / 2 when unset
  std::uint64_t seed = 0;
};

struct SweepRow {
  std::size_t l = 0;
  double clean = 0.0;
  double white_box = 0.0;
  double black_box = 0.0;
};

// For each l: fresh codebook and model from the same seeds, trained and then
// scored on clean data, white-box attacks and the substitute's attacks.
std::vector<SweepRow> dimension_sweep(std::span<const std::size_t> l_values, const SweepTemplate& tmpl,
                                      const Dataset& train_set, const Dataset& test_set,
                                      const AttackSpec& attack, const Model& substitute);
std::string sweep_csv(std::span<const SweepRow> rows);

}  // namespace roboenc
