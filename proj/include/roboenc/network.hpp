#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "roboenc/autodiff.hpp"
#include "roboenc/codebook.hpp"
#include "roboenc/tensor.hpp"

namespace roboenc {

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  friend bool operator==(const Dense&, const Dense&) = default;
};
struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  friend bool operator==(const Conv2d&, const Conv2d&) = default;
};
struct Relu {
  friend bool operator==(const Relu&, const Relu&) = default;
};
struct Flatten {
  friend bool operator==(const Flatten&, const Flatten&) = default;
};
struct Dropout {
  double p = 0.5;
  friend bool operator==(const Dropout&, const Dropout&) = default;
};

using LayerSpec = std::variant<Dense, Conv2d, Relu, Flatten, Dropout>;

// Per-example input shape plus the ordered layer stack.
struct Architecture {
  Shape input_shape;
  std::vector<LayerSpec> layers;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

// Presets: "net-a" (two strided convs + dense), "net-b" (net-a with two hidden
// dense layers), "net-c" (three dense layers),
// "linear" (a single dense layer).
Architecture preset_architecture(const std::string& name, const Shape& input_shape,
                                 std::size_t output_width);

// Shape produced by each layer, first entry is the input shape. Throws
// ShapeError/ContractError when the stack is inconsistent.
std::vector<Shape> layer_shapes(const Architecture& arch);

enum class HeadKind { one_hot_ce, codebook_mse, codebook_softmax, one_hot_mse };

std::string head_kind_name(HeadKind kind);
HeadKind parse_head_kind(const std::string& name);

struct Head {
  HeadKind kind = HeadKind::one_hot_ce;
  std::size_t classes = 0;
  std::optional<Codebook> codebook;  // present for codebook heads

  static Head one_hot_ce(std::size_t k) { return {HeadKind::one_hot_ce, k, std::nullopt}; }
  static Head one_hot_mse(std::size_t k) { return {HeadKind::one_hot_mse, k, std::nullopt}; }
  static Head codebook_mse(Codebook cb);
  static Head codebook_softmax(Codebook cb);

  bool uses_codebook() const noexcept {
    return kind == HeadKind::codebook_mse || kind == HeadKind::codebook_softmax;
  }
  // Width of the final layer: k for one-hot heads, l for codebook heads.
  std::size_t width() const;
  void validate() const;

  friend bool operator==(const Head&, const Head&) = default;
};

struct Model {
  Architecture arch;
  Head head;
  std::uint64_t seed = 0;
  // Weights then bias for every dense/conv layer, in layer order.
  std::vector<Tensor> params;

  friend bool operator==(const Model&, const Model&) = default;
};

// Validates the stack against the head and initializes weights uniformly in
// +-sqrt(6 / fan_in) from `seed`; biases start at zero.
Model make_model(Architecture arch, Head head, std::uint64_t seed);

// Re-draws the weights of one parametric layer (index into arch.layers).
void reinit_layer(Model& model, std::size_t layer_index, std::uint64_t seed);

// Index of the first parameter tensor of each layer (npos for parameterless).
std::vector<std::size_t> param_offsets(const Architecture& arch);

std::vector<Var> bind_params(Tape& tape, const Model& model, bool differentiable);

struct ForwardTrace {
  Var output;                                        // [N, width]
  std::vector<std::pair<std::string, Var>> tagged;  // "input", "conv1", "dense1", ...
};

// Records a batched forward pass. `x` is [N, input_shape...]. Dropout masks
// derive from `seed` and are only applied when `train` is set.
ForwardTrace forward_on(Tape& tape, const Model& model, std::span<const Var> params, Var x,
                        bool train, std::uint64_t seed);

// Final-layer activation. Accepts a single example (input_shape) or a batch.
Tensor forward(const Model& model, const Tensor& x, bool train = false, std::uint64_t seed = 0);

// Head loss of every example in s [N, width], shape [N].
Var per_example_loss(const Head& head, Var s, std::span<const std::size_t> labels);
// Mean per-example head loss over the batch s [N, width].
Var loss_on(const Head& head, Var s, std::span<const std::size_t> labels);
// Single example: s is [width].
double loss(const Head& head, const Tensor& s, std::size_t t);

// argmax for one-hot heads, argmin MSE distance for codebook heads; ties go to
// the lowest class index.
std::size_t classify(const Head& head, std::span<const double> s);
std::vector<std::size_t> classify_batch(const Head& head, const Tensor& s);

// Classification of every image in a [N, ...] tensor, evaluated in chunks.
std::vector<std::size_t> predict(const Model& model, const Tensor& images);
double accuracy(const Model& model, const Tensor& images, std::span<const std::size_t> labels);

struct HeadGradientCheck {
  Tensor analytic;  // y - onehot(t)
  Tensor autodiff;
  double max_abs_diff = 0.0;
};
HeadGradientCheck head_gradient_check(const Head& head, const Tensor& s, std::size_t t);

// Gradient of the summed per-example loss with respect to the input, so each
// example's slice is its own loss gradient. Dropout is inactive.
Tensor input_gradient(const Model& model, const Tensor& x, std::span<const std::size_t> labels);
Tensor input_gradient(const Model& model, const Tensor& x, std::size_t label);

nlohmann::json architecture_to_json(const Architecture& arch);
Architecture architecture_from_json(const nlohmann::json& j);
nlohmann::json head_to_json(const Head& head);  // codebook summarized, not embedded

// "ROMD", u32 version, architecture JSON, head JSON, optional embedded
// codebook (ROCB bytes), u64 seed, then every parameter tensor as f64.
std::string encode_model(const Model& model);
Model decode_model(std::string bytes);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace roboenc
