#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "roboenc/tensor.hpp"

namespace roboenc {

struct Dataset {
  Tensor images;                    // [N, C, H, W], pixels in [0, 1]
  std::vector<std::size_t> labels;  // N entries, each < classes
  std::size_t classes = 0;
  std::string split;

  std::size_t size() const noexcept { return labels.size(); }
  Shape example_shape() const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Throws ContractError when the pixel range, label range or counts are off.
void validate_dataset(const Dataset& ds);

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices, std::string split);
// First `n` examples of every class, in original order.
Dataset take_per_class(const Dataset& ds, std::size_t n, std::string split);

// MNIST IDX pair; either file may be gzip-compressed.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::string split = "idx");

// Seven-segment style glyphs drawn with seeded jitter, stroke width, slant and
// pixel noise. Classes are interleaved: example i has label i % k.
Dataset synth_digits(std::size_t n_per_class, std::size_t k, std::size_t image_size,
                     std::uint64_t seed, std::string split = "synthetic");

enum class CorruptionKind { gaussian_noise, speckle_noise, impulse_noise, brightness };

std::string corruption_name(CorruptionKind kind);
CorruptionKind parse_corruption(const std::string& name);
const std::vector<CorruptionKind>& all_corruptions();

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;  // 1..5
  std::uint64_t seed = 0;
};

// Noise sigma, impulse rate or brightness shift for a severity level.
double corruption_parameter(CorruptionKind kind, int severity);

Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec);

enum class Corner { top_left, top_right, bottom_left, bottom_right };

struct WatermarkSpec {
  std::size_t patch = 3;
  Corner corner = Corner::top_left;
  double value = 1.0;
  std::size_t source = 0;
  std::size_t target = 1;
  double fraction = 1.0;
  std::uint64_t seed = 0;
};

struct Watermarked {
  Dataset marked;   // full dataset, stamped images relabeled to the target
  Dataset trigger;  // stamped images only, labeled with the target
  std::vector<std::size_t> stamped;
};

Watermarked stamp_watermark(const Dataset& ds, const WatermarkSpec& spec);

// Stamps every image with the patch without touching labels.
Dataset apply_patch(const Dataset& ds, const WatermarkSpec& spec);

// "RODS" container: u32 version, u32 classes, split string, u32 rank, u64
// dims, f64 pixels, u16 labels.
std::string encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::string bytes);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// "index,label" rows with a header line.
std::string labels_csv(const Dataset& ds);

}  // namespace roboenc
