#include "roboenc/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "roboenc/binary_io.hpp"
#include "roboenc/errors.hpp"
#include "roboenc/rng.hpp"

namespace roboenc {

namespace {

constexpr std::uint32_t kModelVersion = 1;
constexpr std::size_t kPredictChunk = 256;
constexpr std::size_t npos = static_cast<std::size_t>(-1);

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

bool has_params(const LayerSpec& layer) {
  return std::holds_alternative<Dense>(layer) || std::holds_alternative<Conv2d>(layer);
}

void init_layer(const LayerSpec& layer, std::uint64_t seed, Tensor& weight, Tensor& bias) {
  Rng rng(seed);
  std::visit(overloaded{
                 [&](const Dense& d) {
                   weight = Tensor(Shape{d.in, d.out});
                   bias = Tensor(Shape{d.out}, 0.0);
                   const double bound = std::sqrt(6.0 / static_cast<double>(d.in));
                   for (double& v : weight.data()) v = rng.uniform(-bound, bound);
                 },
                 [&](const Conv2d& c) {
                   weight = Tensor(Shape{c.out_channels, c.in_channels, c.kernel, c.kernel});
                   bias = Tensor(Shape{c.out_channels}, 0.0);
                   const double fan_in = static_cast<double>(c.in_channels * c.kernel * c.kernel);
                   const double bound = std::sqrt(6.0 / fan_in);
                   for (double& v : weight.data()) v = rng.uniform(-bound, bound);
                 },
                 [](const auto&) {},
             },
             layer);
}

Tensor batched(const Model& model, const Tensor& x, bool& was_single) {
  const Shape& in = model.arch.input_shape;
  if (x.shape() == in) {
    was_single = true;
    Shape s{1};
    s.insert(s.end(), in.begin(), in.end());
    return x.reshaped(std::move(s));
  }
  was_single = false;
  if (x.rank() != in.size() + 1 || !std::equal(in.begin(), in.end(), x.shape().begin() + 1)) {
    throw ShapeError("input " + shape_to_string(x.shape()) + " does not match model input " +
                     shape_to_string(in));
  }
  return x;
}

}  // namespace

Architecture preset_architecture(const std::string& name, const Shape& input_shape,
                                 std::size_t output_width) {
  std::size_t flat = shape_size(input_shape);
  if (name == "net-a") {
    if (input_shape.size() != 3) throw ContractError("net-a needs a [C,H,W] input");
    Architecture arch{input_shape,
                      {Conv2d{input_shape[0], 8, 5, 2}, Relu{}, Conv2d{8, 16, 5, 2}, Relu{},
                       Flatten{}}};
    const std::vector<Shape> shapes = layer_shapes(arch);
    flat = shape_size(shapes.back());
    arch.layers.push_back(Dropout{0.5});
    arch.layers.push_back(Dense{flat, output_width});
    return arch;
  }
  if (name == "net-b") {
    if (input_shape.size() != 3) throw ContractError("net-b needs a [C,H,W] input");
    Architecture arch{input_shape,
                      {Conv2d{input_shape[0], 8, 5, 2}, Relu{}, Conv2d{8, 16, 5, 2}, Relu{}, Flatten{}}};
    flat = shape_size(layer_shapes(arch).back());
    for (LayerSpec layer : std::vector<LayerSpec>{Dense{flat, 128}, Relu{}, Dropout{0.5}, Dense{128, 64}, Relu{},
                                                  Dropout{0.5}, Dense{64, output_width}}) {
      arch.layers.push_back(layer);
    }
    return arch;
  }
  if (name == "net-c") {
    return Architecture{input_shape,
                        {Flatten{}, Dense{flat, 128}, Relu{}, Dropout{0.25}, Dense{128, 64}, Relu{},
                         Dropout{0.25}, Dense{64, output_width}}};
  }
  if (name == "linear") {
    return Architecture{input_shape, {Flatten{}, Dense{flat, output_width}}};
  }
  throw ContractError("unknown architecture preset \"" + name + "\"");
}

std::vector<Shape> layer_shapes(const Architecture& arch) {
  if (arch.input_shape.empty()) throw ShapeError("model input shape is empty");
  std::vector<Shape> shapes{arch.input_shape};
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const Shape& cur = shapes.back();
    const std::string where = "layer " + std::to_string(i) + ": ";
    Shape next = std::visit(
        overloaded{
            [&](const Dense& d) -> Shape {
              if (d.in == 0 || d.out == 0) throw ShapeError(where + "dense with zero width");
              if (cur.size() != 1 || cur[0] != d.in) {
                throw ShapeError(where + "dense(" + std::to_string(d.in) + ") fed " +
                                 shape_to_string(cur));
              }
              return Shape{d.out};
            },
            [&](const Conv2d& c) -> Shape {
              if (c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
                throw ShapeError(where + "conv2d with zero extent");
              }
              if (cur.size() != 3 || cur[0] != c.in_channels) {
                throw ShapeError(where + "conv2d(" + std::to_string(c.in_channels) + " ch) fed " +
                                 shape_to_string(cur));
              }
              if (c.kernel > cur[1] || c.kernel > cur[2]) {
                throw ShapeError(where + "conv2d kernel larger than its input");
              }
              return Shape{c.out_channels, (cur[1] - c.kernel) / c.stride + 1,
                           (cur[2] - c.kernel) / c.stride + 1};
            },
            [&](const Relu&) -> Shape { return cur; },
            [&](const Flatten&) -> Shape { return Shape{shape_size(cur)}; },
            [&](const Dropout& d) -> Shape {
              if (!(d.p >= 0.0 && d.p < 1.0)) throw ContractError(where + "dropout p outside [0,1)");
              if (i + 1 >= arch.layers.size() || !std::holds_alternative<Dense>(arch.layers[i + 1])) {
                throw ContractError(where + "dropout must directly precede a dense layer");
              }
              return cur;
            },
        },
        arch.layers[i]);
    shapes.push_back(std::move(next));
  }
  return shapes;
}

std::string head_kind_name(HeadKind kind) {
  switch (kind) {
    case HeadKind::one_hot_ce: return "one_hot_ce";
    case HeadKind::codebook_mse: return "codebook_mse";
    case HeadKind::codebook_softmax: return "codebook_softmax";
    case HeadKind::one_hot_mse: return "one_hot_mse";
  }
  return "unknown";
}

HeadKind parse_head_kind(const std::string& name) {
  for (HeadKind k : {HeadKind::one_hot_ce, HeadKind::codebook_mse, HeadKind::codebook_softmax,
                     HeadKind::one_hot_mse}) {
    if (head_kind_name(k) == name) return k;
  }
  throw ConfigError("unknown head kind \"" + name + "\"");
}

Head Head::codebook_mse(Codebook cb) {
  const std::size_t k = cb.k;
  Head h{HeadKind::codebook_mse, k, std::move(cb)};
  h.validate();
  return h;
}

Head Head::codebook_softmax(Codebook cb) {
  const std::size_t k = cb.k;
  Head h{HeadKind::codebook_softmax, k, std::move(cb)};
  h.validate();
  return h;
}

std::size_t Head::width() const { return uses_codebook() ? codebook->l : classes; }

void Head::validate() const {
  if (classes == 0) throw ContractError("head needs at least one class");
  if (uses_codebook()) {
    if (!codebook) throw ContractError("codebook head without a codebook");
    validate_codebook(*codebook);
    if (codebook->k != classes) throw ContractError("codebook class count differs from head");
  }
}

std::vector<std::size_t> param_offsets(const Architecture& arch) {
  std::vector<std::size_t> out;
  std::size_t next = 0;
  for (const LayerSpec& layer : arch.layers) {
    if (has_params(layer)) {
      out.push_back(next);
      next += 2;
    } else {
      out.push_back(npos);
    }
  }
  return out;
}

Model make_model(Architecture arch, Head head, std::uint64_t seed) {
  head.validate();
  const std::vector<Shape> shapes = layer_shapes(arch);
  if (shapes.back() != Shape{head.width()}) {
    throw ShapeError("model output " + shape_to_string(shapes.back()) + " but head expects [" +
                     std::to_string(head.width()) + "]");
  }
  Model model{std::move(arch), std::move(head), seed, {}};
  for (std::size_t i = 0; i < model.arch.layers.size(); ++i) {
    if (!has_params(model.arch.layers[i])) continue;
    Tensor w, b;
    init_layer(model.arch.layers[i], derive_seed(seed, i), w, b);
    model.params.push_back(std::move(w));
    model.params.push_back(std::move(b));
  }
  return model;
}

void reinit_layer(Model& model, std::size_t layer_index, std::uint64_t seed) {
  const auto offsets = param_offsets(model.arch);
  if (layer_index >= offsets.size() || offsets[layer_index] == npos) {
    throw ContractError("layer " + std::to_string(layer_index) + " has no parameters");
  }
  init_layer(model.arch.layers[layer_index], seed, model.params[offsets[layer_index]],
             model.params[offsets[layer_index] + 1]);
}

std::vector<Var> bind_params(Tape& tape, const Model& model, bool differentiable) {
  std::vector<Var> vars;
  vars.reserve(model.params.size());
  for (const Tensor& p : model.params) {
    vars.push_back(differentiable ? tape.leaf(p) : tape.constant(p));
  }
  return vars;
}

ForwardTrace forward_on(Tape& tape, const Model& model, std::span<const Var> params, Var x,
                        bool train, std::uint64_t seed) {
  if (params.size() != model.params.size()) throw ContractError("parameter count mismatch");
  const Shape& in = model.arch.input_shape;
  if (x.shape().size() != in.size() + 1 ||
      !std::equal(in.begin(), in.end(), x.shape().begin() + 1)) {
    throw ShapeError("input " + shape_to_string(x.shape()) + " does not match model input " +
                     shape_to_string(in));
  }
  const std::size_t batch = x.shape()[0];
  ForwardTrace trace;
  trace.tagged.emplace_back("input", x);
  std::size_t next_param = 0, conv_count = 0, dense_count = 0;
  Var h = x;
  for (std::size_t i = 0; i < model.arch.layers.size(); ++i) {
    std::visit(overloaded{
                   [&](const Dense&) {
                     h = ad::add(ad::matmul(h, params[next_param]), params[next_param + 1]);
                     next_param += 2;
                     trace.tagged.emplace_back("dense" + std::to_string(++dense_count), h);
                   },
                   [&](const Conv2d& c) {
                     h = ad::conv2d(h, params[next_param], params[next_param + 1], c.stride);
                     next_param += 2;
                     trace.tagged.emplace_back("conv" + std::to_string(++conv_count), h);
                   },
                   [&](const Relu&) { h = ad::relu(h); },
                   [&](const Flatten&) {
                     h = ad::reshape(h, Shape{batch, h.value().size() / batch});
                   },
                   [&](const Dropout& d) {
                     if (!train || d.p == 0.0) return;
                     Rng rng(derive_seed(seed, i));
                     Tensor mask(h.shape());
                     const double keep = 1.0 / (1.0 - d.p);
                     for (double& m : mask.data()) m = rng.uniform() < d.p ? 0.0 : keep;
                     h = ad::mul(h, tape.constant(std::move(mask)));
                   },
               },
               model.arch.layers[i]);
  }
  trace.output = h;
  return trace;
}

Tensor forward(const Model& model, const Tensor& x, bool train, std::uint64_t seed) {
  bool single = false;
  Tensor xb = batched(model, x, single);
  Tape tape;
  const std::vector<Var> params = bind_params(tape, model, false);
  Var out = forward_on(tape, model, params, tape.constant(std::move(xb)), train, seed).output;
  Tensor s = out.value();
  if (single) return s.reshaped(Shape{s.size()});
  return s;
}

Var per_example_loss(const Head& head, Var s, std::span<const std::size_t> labels) {
  if (s.shape().size() != 2 || s.shape()[1] != head.width()) {
    throw ShapeError("head expects activations [N," + std::to_string(head.width()) + "], got " +
                     shape_to_string(s.shape()));
  }
  if (labels.size() != s.shape()[0]) throw ContractError("one label per example required");
  for (std::size_t t : labels) {
    if (t >= head.classes) throw ContractError("label " + std::to_string(t) + " out of range");
  }
  switch (head.kind) {
    case HeadKind::one_hot_ce:
      return ad::scale(ad::pick(ad::log_softmax(s), labels), -1.0);
    case HeadKind::codebook_mse:
      return ad::pick(ad::row_mse(s, head.codebook->rows), labels);
    case HeadKind::one_hot_mse: {
      Tensor eye(Shape{head.classes, head.classes}, 0.0);
      for (std::size_t i = 0; i < head.classes; ++i) eye[i * head.classes + i] = 1.0;
      return ad::pick(ad::row_mse(s, eye), labels);
    }
    case HeadKind::codebook_softmax: {
      const Codebook& cb = *head.codebook;
      Tensor unit_t(Shape{cb.l, cb.k});
      const Tensor unit = cb.unit_rows();
      for (std::size_t i = 0; i < cb.k; ++i)
        for (std::size_t j = 0; j < cb.l; ++j) unit_t[j * cb.k + i] = unit[i * cb.l + j];
      Var logits = ad::matmul(ad::l2_normalize_rows(s), s.tape()->constant(std::move(unit_t)));
      return ad::scale(ad::pick(ad::log_softmax(logits), labels), -1.0);
    }
  }
  throw ContractError("unknown head kind");
}

Var loss_on(const Head& head, Var s, std::span<const std::size_t> labels) {
  return ad::mean(per_example_loss(head, s, labels));
}

double loss(const Head& head, const Tensor& s, std::size_t t) {
  s.require_finite("loss activations");
  Tape tape;
  Var sv = tape.constant(s.reshaped(Shape{1, s.size()}));
  const std::size_t label[] = {t};
  return loss_on(head, sv, label).value().item();
}

std::size_t classify(const Head& head, std::span<const double> s) {
  if (s.size() != head.width()) throw ShapeError("classify: activation width mismatch");
  if (!head.uses_codebook()) {
    return static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
  }
  const Codebook& cb = *head.codebook;
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cb.k; ++i) {
    const auto row = cb.row(i);
    double d = 0.0;
    for (std::size_t j = 0; j < cb.l; ++j) d += (s[j] - row[j]) * (s[j] - row[j]);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

std::vector<std::size_t> classify_batch(const Head& head, const Tensor& s) {
  if (s.rank() != 2) throw ShapeError("classify_batch expects [N, width]");
  const std::size_t n = s.shape()[0], w = s.shape()[1];
  std::vector<std::size_t> out(n);
  for (std::size_t r = 0; r < n; ++r) out[r] = classify(head, s.data().subspan(r * w, w));
  return out;
}

std::vector<std::size_t> predict(const Model& model, const Tensor& images) {
  if (images.rank() == 0) throw ShapeError("predict on a scalar");
  std::vector<std::size_t> out;
  const std::size_t n = images.shape()[0];
  out.reserve(n);
  for (std::size_t b = 0; b < n; b += kPredictChunk) {
    const Tensor chunk = images.slice_rows(b, std::min(n, b + kPredictChunk));
    const auto labels = classify_batch(model.head, forward(model, chunk));
    out.insert(out.end(), labels.begin(), labels.end());
  }
  return out;
}

double accuracy(const Model& model, const Tensor& images, std::span<const std::size_t> labels) {
  const auto pred = predict(model, images);
  if (pred.size() != labels.size()) throw ContractError("accuracy: label count mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

HeadGradientCheck head_gradient_check(const Head& head, const Tensor& s, std::size_t t) {
  if (head.kind != HeadKind::one_hot_ce) {
    throw ContractError("head_gradient_check applies to the one-hot cross-entropy head");
  }
  if (s.rank() != 1 || s.size() != head.classes) throw ShapeError("activation width mismatch");
  if (t >= head.classes) throw ContractError("class index out of range");

  HeadGradientCheck out;
  out.analytic = Tensor(s.shape());
  const double mx = *std::max_element(s.values().begin(), s.values().end());
  double z = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) z += std::exp(s[i] - mx);
  for (std::size_t i = 0; i < s.size(); ++i) {
    out.analytic[i] = std::exp(s[i] - mx) / z - (i == t ? 1.0 : 0.0);
  }

  Tape tape;
  Var sv = tape.leaf(s.reshaped(Shape{1, s.size()}));
  const std::size_t label[] = {t};
  const Gradients g = tape.backward(loss_on(head, sv, label));
  out.autodiff = g.of(sv).reshaped(s.shape());
  out.max_abs_diff = max_abs_diff(out.analytic, out.autodiff);
  return out;
}

Tensor input_gradient(const Model& model, const Tensor& x, std::span<const std::size_t> labels) {
  bool single = false;
  Tensor xb = batched(model, x, single);
  Tape tape;
  const std::vector<Var> params = bind_params(tape, model, false);
  Var xv = tape.leaf(std::move(xb));
  Var s = forward_on(tape, model, params, xv, false, 0).output;
  const Gradients g = tape.backward(ad::sum(per_example_loss(model.head, s, labels)));
  Tensor grad = g.of(xv);
  if (single) return grad.reshaped(x.shape());
  return grad;
}

Tensor input_gradient(const Model& model, const Tensor& x, std::size_t label) {
  const std::size_t labels[] = {label};
  return input_gradient(model, x, labels);
}

nlohmann::json architecture_to_json(const Architecture& arch) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerSpec& layer : arch.layers) {
    layers.push_back(std::visit(
        overloaded{
            [](const Dense& d) -> nlohmann::json {
              return {{"kind", "dense"}, {"in", d.in}, {"out", d.out}};
            },
            [](const Conv2d& c) -> nlohmann::json {
              return {{"kind", "conv2d"},         {"in_channels", c.in_channels},
                      {"out_channels", c.out_channels}, {"kernel", c.kernel},
                      {"stride", c.stride}};
            },
            [](const Relu&) -> nlohmann::json { return {{"kind", "relu"}}; },
            [](const Flatten&) -> nlohmann::json { return {{"kind", "flatten"}}; },
            [](const Dropout& d) -> nlohmann::json { return {{"kind", "dropout"}, {"p", d.p}}; },
        },
        layer));
  }
  return {{"input_shape", arch.input_shape}, {"layers", layers}};
}

Architecture architecture_from_json(const nlohmann::json& j) {
  try {
    Architecture arch;
    arch.input_shape = j.at("input_shape").get<Shape>();
    for (const auto& l : j.at("layers")) {
      const std::string kind = l.at("kind").get<std::string>();
      if (kind == "dense") {
        arch.layers.emplace_back(Dense{l.at("in").get<std::size_t>(), l.at("out").get<std::size_t>()});
      } else if (kind == "conv2d") {
        arch.layers.emplace_back(Conv2d{l.at("in_channels").get<std::size_t>(),
                                        l.at("out_channels").get<std::size_t>(),
                                        l.at("kernel").get<std::size_t>(),
                                        l.at("stride").get<std::size_t>()});
      } else if (kind == "relu") {
        arch.layers.emplace_back(Relu{});
      } else if (kind == "flatten") {
        arch.layers.emplace_back(Flatten{});
      } else if (kind == "dropout") {
        arch.layers.emplace_back(Dropout{l.at("p").get<double>()});
      } else {
        throw FormatError("unknown layer kind \"" + kind + "\"");
      }
    }
    return arch;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad architecture descriptor: ") + e.what());
  }
}

nlohmann::json head_to_json(const Head& head) {
  nlohmann::json j{{"kind", head_kind_name(head.kind)}, {"classes", head.classes}};
  if (head.codebook) {
    j["codebook"] = {{"k", head.codebook->k},
                     {"l", head.codebook->l},
                     {"beta", head.codebook->beta},
                     {"seed", head.codebook->seed}};
  }
  return j;
}

std::string encode_model(const Model& model) {
  io::Writer w;
  w.bytes("ROMD");
  w.u32(kModelVersion);
  w.string(architecture_to_json(model.arch).dump());
  w.string(head_to_json(model.head).dump());
  w.u32(model.head.codebook ? 1 : 0);
  if (model.head.codebook) w.string(encode_codebook(*model.head.codebook));
  w.u64(model.seed);
  w.u32(static_cast<std::uint32_t>(model.params.size()));
  for (const Tensor& p : model.params) {
    w.u32(static_cast<std::uint32_t>(p.rank()));
    for (std::size_t d : p.shape()) w.u64(d);
    w.f64s(p.data());
  }
  return w.buffer();
}

Model decode_model(std::string bytes) {
  io::Reader r(std::move(bytes));
  r.expect_magic("ROMD");
  if (const auto v = r.u32(); v != kModelVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v));
  }
  Model model;
  try {
    model.arch = architecture_from_json(nlohmann::json::parse(r.string()));
    const auto head_json = nlohmann::json::parse(r.string());
    model.head.kind = parse_head_kind(head_json.at("kind").get<std::string>());
    model.head.classes = head_json.at("classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint descriptor: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  if (r.u32() != 0) model.head.codebook = decode_codebook(r.string());
  model.seed = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Shape shape(r.u32());
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
    for (auto d : shape) {
      if (d == 0) throw FormatError("zero extent in checkpoint tensor");
    }
    model.params.emplace_back(shape, r.f64s(shape_size(shape)));
  }
  if (!r.at_end()) throw FormatError("trailing bytes in checkpoint");
  model.head.validate();
  // The stored weights must line up with the declared architecture.
  const Model reference = make_model(model.arch, model.head, 0);
  if (reference.params.size() != model.params.size()) throw FormatError("parameter count mismatch");
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (reference.params[i].shape() != model.params[i].shape()) {
      throw FormatError("parameter " + std::to_string(i) + " has the wrong shape");
    }
  }
  return model;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  io::write_file(path, encode_model(model));
}

Model load_model(const std::filesystem::path& path) { return decode_model(io::read_file(path)); }

}  // namespace roboenc
