#include "roboenc/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>

#include "roboenc/binary_io.hpp"
#include "roboenc/errors.hpp"
#include "roboenc/rng.hpp"

namespace roboenc {

namespace {

constexpr std::uint32_t kRodsVersion = 1;

std::string read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw FormatError("cannot open " + path.string());
  std::string out;
  std::array<char, 1 << 16> buf{};
  int n = 0;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) {
    out.append(buf.data(), static_cast<std::size_t>(n));
  }
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw FormatError("read error in " + path.string());
  return out;
}

std::uint32_t be32(const std::string& bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) throw FormatError("IDX header truncated");
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

struct Point {
  double x, y;
};

double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = p.x - (a.x + t * dx), ey = p.y - (a.y + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

// Segments a..g as pairs of the six glyph vertices
// 0 top-left, 1 top-right, 2 mid-left, 3 mid-right, 4 bottom-left, 5 bottom-right.
constexpr std::array<std::array<int, 2>, 7> kSegments{{
    {0, 1}, {1, 3}, {3, 5}, {4, 5}, {2, 4}, {0, 2}, {2, 3}}};

// Active segments (bit i = segment i) for digits 0..9.
constexpr std::array<unsigned, 10> kDigitMasks{
    0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110,
    0b1101101, 0b1111101, 0b0000111, 0b1111111, 0b1101111};

void draw_glyph(std::size_t digit, std::size_t size, Rng& rng, double* out) {
  const double s = static_cast<double>(size);
  const double w = s * rng.uniform(0.32, 0.48);
  const double h = s * rng.uniform(0.52, 0.68);
  const double cx = s / 2 + s * rng.uniform(-0.08, 0.08);
  const double cy = s / 2 + s * rng.uniform(-0.08, 0.08);
  const double slant = rng.uniform(-0.2, 0.2);
  const double stroke = s * rng.uniform(0.05, 0.09);
  const double ink = rng.uniform(0.75, 1.0);

  std::array<Point, 6> v{};
  for (std::size_t i = 0; i < 6; ++i) {
    const double ux = static_cast<double>(i % 2) + 0.05 * rng.normal();
    const double uy = 0.5 * static_cast<double>(i / 2) + 0.05 * rng.normal();
    const double y = cy + (uy - 0.5) * h;
    v[i] = {cx + (ux - 0.5) * w - slant * (y - cy), y};
  }
  const unsigned mask = kDigitMasks[digit];
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const Point p{static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5};
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t seg = 0; seg < kSegments.size(); ++seg) {
        if (mask & (1u << seg)) {
          d = std::min(d, segment_distance(p, v[kSegments[seg][0]], v[kSegments[seg][1]]));
        }
      }
      out[r * size + c] = ink * std::clamp(stroke / 2 + 0.5 - d, 0.0, 1.0);
    }
  }
}

void patch_image(double* img, std::size_t channels, std::size_t height, std::size_t width,
                 const WatermarkSpec& spec) {
  const bool bottom = spec.corner == Corner::bottom_left || spec.corner == Corner::bottom_right;
  const bool right = spec.corner == Corner::top_right || spec.corner == Corner::bottom_right;
  const std::size_t r0 = bottom ? height - spec.patch : 0;
  const std::size_t c0 = right ? width - spec.patch : 0;
  for (std::size_t ch = 0; ch < channels; ++ch) {
    for (std::size_t r = r0; r < r0 + spec.patch; ++r) {
      for (std::size_t c = c0; c < c0 + spec.patch; ++c) {
        img[(ch * height + r) * width + c] = spec.value;
      }
    }
  }
}

void check_patch(const Dataset& ds, const WatermarkSpec& spec) {
  if (ds.images.rank() != 4) throw ShapeError("watermark expects [N, C, H, W] images");
  if (spec.patch == 0 || spec.patch > ds.images.dim(2) || spec.patch > ds.images.dim(3)) {
    throw ContractError("watermark patch does not fit the image");
  }
  if (!(spec.value >= 0.0 && spec.value <= 1.0)) throw ContractError("watermark value outside [0, 1]");
}

}  // namespace

Shape Dataset::example_shape() const {
  const Shape& s = images.shape();
  return Shape(s.begin() + 1, s.end());
}

void validate_dataset(const Dataset& ds) {
  if (ds.images.rank() < 2) throw ContractError("dataset images need a leading example axis");
  if (ds.images.dim(0) != ds.labels.size()) throw ContractError("image and label counts differ");
  for (std::size_t t : ds.labels) {
    if (t >= ds.classes) throw ContractError("label out of range");
  }
  for (double v : ds.images.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("pixel outside [0, 1]");
  }
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices, std::string split) {
  if (indices.empty()) throw ContractError("empty subset");
  const std::size_t stride = shape_size(ds.example_shape());
  Shape shape = ds.images.shape();
  shape[0] = indices.size();
  std::vector<double> pixels;
  pixels.reserve(indices.size() * stride);
  std::vector<std::size_t> labels;
  labels.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= ds.size()) throw ContractError("subset index out of range");
    auto src = ds.images.data().subspan(i * stride, stride);
    pixels.insert(pixels.end(), src.begin(), src.end());
    labels.push_back(ds.labels[i]);
  }
  return Dataset{Tensor(shape, std::move(pixels)), std::move(labels), ds.classes, std::move(split)};
}

Dataset take_per_class(const Dataset& ds, std::size_t n, std::string split) {
  std::vector<std::size_t> taken(ds.classes, 0), indices;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (taken[ds.labels[i]] < n) {
      ++taken[ds.labels[i]];
      indices.push_back(i);
    }
  }
  return subset(ds, indices, std::move(split));
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::string split) {
  const std::string img = read_maybe_gzip(images);
  const std::string lab = read_maybe_gzip(labels);
  if (be32(img, 0) != 2051) throw FormatError("bad IDX image magic in " + images.string());
  if (be32(lab, 0) != 2049) throw FormatError("bad IDX label magic in " + labels.string());
  const std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  const std::size_t n_labels = be32(lab, 4);
  if (n != n_labels) throw FormatError("IDX image and label counts differ");
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("empty IDX file");
  if (img.size() != 16 + n * rows * cols) throw FormatError("IDX image payload size mismatch");
  if (lab.size() != 8 + n) throw FormatError("IDX label payload size mismatch");

  Tensor pixels(Shape{n, 1, rows, cols});
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = static_cast<unsigned char>(img[16 + i]) / 255.0;
  }
  Dataset ds{std::move(pixels), std::vector<std::size_t>(n), 0, std::move(split)};
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = static_cast<unsigned char>(lab[8 + i]);
    ds.classes = std::max(ds.classes, ds.labels[i] + 1);
  }
  ds.classes = std::max<std::size_t>(ds.classes, 10);
  return ds;
}

Dataset synth_digits(std::size_t n_per_class, std::size_t k, std::size_t image_size,
                     std::uint64_t seed, std::string split) {
  if (k < 1 || k > 10) throw ContractError("synth_digits supports 1..10 classes");
  if (image_size < 8) throw ContractError("synth_digits needs image_size >= 8");
  if (n_per_class == 0) throw ContractError("synth_digits needs at least one example per class");
  const std::size_t n = n_per_class * k, px = image_size * image_size;
  Tensor images(Shape{n, 1, image_size, image_size});
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    labels[i] = i % k;
    double* out = images.data().data() + i * px;
    draw_glyph(labels[i], image_size, rng, out);
    for (std::size_t j = 0; j < px; ++j) out[j] = std::clamp(out[j] + 0.08 * rng.normal(), 0.0, 1.0);
  }
  return Dataset{std::move(images), std::move(labels), k, std::move(split)};
}

std::string corruption_name(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::gaussian_noise: return "gaussian-noise";
    case CorruptionKind::speckle_noise: return "speckle-noise";
    case CorruptionKind::impulse_noise: return "impulse-noise";
    case CorruptionKind::brightness: return "brightness";
  }
  return "unknown";
}

CorruptionKind parse_corruption(const std::string& name) {
  for (CorruptionKind k : all_corruptions()) {
    if (corruption_name(k) == name) return k;
  }
  throw ConfigError("unknown corruption '" + name + "'");
}

const std::vector<CorruptionKind>& all_corruptions() {
  static const std::vector<CorruptionKind> kinds{
      CorruptionKind::gaussian_noise, CorruptionKind::speckle_noise,
      CorruptionKind::impulse_noise, CorruptionKind::brightness};
  return kinds;
}

double corruption_parameter(CorruptionKind kind, int severity) {
  if (severity < 1 || severity > 5) throw ContractError("corruption severity must be in 1..5");
  static constexpr std::array<double, 5> gaussian{0.04, 0.06, 0.08, 0.09, 0.10};
  static constexpr std::array<double, 5> speckle{0.06, 0.10, 0.12, 0.16, 0.20};
  static constexpr std::array<double, 5> impulse{0.01, 0.02, 0.03, 0.05, 0.07};
  static constexpr std::array<double, 5> bright{0.05, 0.10, 0.15, 0.20, 0.30};
  const auto i = static_cast<std::size_t>(severity - 1);
  switch (kind) {
    case CorruptionKind::gaussian_noise: return gaussian[i];
    case CorruptionKind::speckle_noise: return speckle[i];
    case CorruptionKind::impulse_noise: return impulse[i];
    case CorruptionKind::brightness: return bright[i];
  }
  return 0.0;
}

Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec) {
  const double p = corruption_parameter(spec.kind, spec.severity);
  Dataset out = ds;
  const std::size_t stride = shape_size(ds.example_shape());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Rng rng(derive_seed(spec.seed, i));
    auto img = out.images.data().subspan(i * stride, stride);
    for (double& v : img) {
      switch (spec.kind) {
        case CorruptionKind::gaussian_noise: v += p * rng.normal(); break;
        case CorruptionKind::speckle_noise: v *= 1.0 + p * rng.normal(); break;
        case CorruptionKind::impulse_noise:
          if (rng.uniform() < p) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
          break;
        case CorruptionKind::brightness: v += p; break;
      }
      v = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

Watermarked stamp_watermark(const Dataset& ds, const WatermarkSpec& spec) {
  check_patch(ds, spec);
  if (spec.source == spec.target) throw ContractError("watermark source equals target");
  if (spec.target >= ds.classes || spec.source >= ds.classes) {
    throw ContractError("watermark class out of range");
  }
  if (!(spec.fraction > 0.0 && spec.fraction <= 1.0)) throw ContractError("watermark fraction outside (0, 1]");

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] == spec.source) candidates.push_back(i);
  }
  if (candidates.empty()) throw ContractError("watermark source class is empty");
  const auto count = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(spec.fraction * static_cast<double>(candidates.size()))));
  Rng rng(spec.seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.below(candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
  }
  candidates.resize(count);
  std::sort(candidates.begin(), candidates.end());

  Watermarked w{ds, Dataset{}, candidates};
  const Shape& s = ds.images.shape();
  const std::size_t stride = shape_size(ds.example_shape());
  for (std::size_t i : candidates) {
    patch_image(w.marked.images.data().data() + i * stride, s[1], s[2], s[3], spec);
    w.marked.labels[i] = spec.target;
  }
  w.trigger = subset(w.marked, candidates, "trigger");
  return w;
}

Dataset apply_patch(const Dataset& ds, const WatermarkSpec& spec) {
  check_patch(ds, spec);
  Dataset out = ds;
  const Shape& s = ds.images.shape();
  const std::size_t stride = shape_size(ds.example_shape());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    patch_image(out.images.data().data() + i * stride, s[1], s[2], s[3], spec);
  }
  return out;
}

std::string encode_dataset(const Dataset& ds) {
  io::Writer w;
  w.bytes("RODS");
  w.u32(kRodsVersion);
  w.u32(static_cast<std::uint32_t>(ds.classes));
  w.string(ds.split);
  w.u32(static_cast<std::uint32_t>(ds.images.rank()));
  for (std::size_t d : ds.images.shape()) w.u64(d);
  w.f64s(ds.images.data());
  w.u64(ds.labels.size());
  for (std::size_t t : ds.labels) {
    if (t > std::numeric_limits<std::uint16_t>::max()) throw ContractError("label exceeds u16");
    w.u16(static_cast<std::uint16_t>(t));
  }
  return w.buffer();
}

Dataset decode_dataset(std::string bytes) {
  io::Reader r(std::move(bytes));
  r.expect_magic("RODS");
  if (r.u32() != kRodsVersion) throw FormatError("unsupported RODS version");
  Dataset ds;
  ds.classes = r.u32();
  ds.split = r.string();
  const std::uint32_t rank = r.u32();
  if (rank < 2 || rank > 8) throw FormatError("RODS rank out of range");
  Shape shape(rank);
  std::size_t total = 1;
  for (auto& d : shape) {
    d = r.u64();
    if (d == 0 || total > r.remaining() / d) throw FormatError("RODS shape inconsistent with payload");
    total *= d;
  }
  if (total > r.remaining() / 8) throw FormatError("RODS pixel payload truncated");
  ds.images = Tensor(shape, r.f64s(total));
  const std::uint64_t n = r.u64();
  if (n != shape[0]) throw FormatError("RODS label count mismatch");
  ds.labels.resize(n);
  for (auto& t : ds.labels) t = r.u16();
  if (!r.at_end()) throw FormatError("trailing bytes in RODS file");
  try {
    validate_dataset(ds);
  } catch (const ContractError& e) {
    throw FormatError(std::string("RODS content invalid: ") + e.what());
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::write_file(path, encode_dataset(ds));
}

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(io::read_file(path)); }

std::string labels_csv(const Dataset& ds) {
  std::ostringstream out;
  out << "index,label\n";
  for (std::size_t i = 0; i < ds.size(); ++i) out << i << ',' << ds.labels[i] << '\n';
  return out.str();
}

}  // namespace roboenc
