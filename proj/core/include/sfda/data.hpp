#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sfda/errors.hpp"

namespace sfda {

/// Uniform box in RGB space; one color per draw.
struct ColorRange {
  float lo[3];
  float hi[3];
};

/// Nuisance-factor recipe for one domain. Object shape (the label) is
/// domain-independent; background, object color, texture, noise and clutter
/// carry the domain shift.
struct DomainSpec {
  std::string name;
  ColorRange background{{0.f, 0.f, 0.f}, {1.f, 1.f, 1.f}};
  float texture_amplitude = 0.f;  // 0 = solid background
  ColorRange object{{0.f, 0.f, 0.f}, {1.f, 1.f, 1.f}};
  float noise_level = 0.f;
  int clutter_count = 0;
  float min_contrast = 0.2f;  // expected per-pixel object/background gap
};

/// Default shift recipe: light solid backgrounds with warm objects on the
/// source side; dark textured backgrounds, cold objects and clutter blobs
/// on the target side.
DomainSpec default_source_domain();
DomainSpec default_target_domain();

enum class SplitMode { kClosed, kPartial, kOpen };

std::string split_mode_name(SplitMode mode);
SplitMode parse_split_mode(const std::string& name);

struct SplitSpec {
  SplitMode mode = SplitMode::kClosed;
  std::vector<int> shared_classes;
  std::vector<int> source_only_classes;    // partial: missing from target
  std::vector<int> target_unknown_classes; // open: shape ids absent from source
};

/// Number of distinct shape rasterizers (disk, square, triangle, cross,
/// ring, bar, L-shape, diamond).
inline constexpr std::size_t kNumShapes = 8;

/// Label value used for open-set unknown samples: classes (== K).
struct Dataset {
  std::size_t classes = 0;  // K known classes
  std::size_t image_side = 32;
  std::size_t channels = 3;
  std::string domain;
  SplitSpec split;
  std::uint64_t seed = 0;
  std::vector<float> images;        // count * C * S * S, values in [0,1]
  std::vector<std::uint8_t> masks;  // count * S * S, 0/1
  std::vector<std::int32_t> labels; // count

  std::size_t count() const { return labels.size(); }
  std::size_t image_size() const { return channels * image_side * image_side; }
  const float* image(std::size_t i) const { return images.data() + i * image_size(); }
  const std::uint8_t* mask(std::size_t i) const {
    return masks.data() + i * image_side * image_side;
  }
};

/// n samples from one domain over classes [0, num_classes). The label is
/// the object shape; everything else is drawn from the domain palettes.
/// Deterministic per (spec, seed); sample i depends only on seed and i.
Dataset generate(const DomainSpec& domain, std::size_t n,
                 std::size_t num_classes, std::uint64_t seed);

/// As generate(), but over an explicit list of shape ids; relabel maps each
/// shape id to the stored label.
Dataset generate_shapes(const DomainSpec& domain, std::size_t n,
                        const std::vector<int>& shape_ids,
                        const std::vector<int>& relabel, std::uint64_t seed);

struct SplitDatasets {
  Dataset source_train;
  Dataset source_eval;
  Dataset target_train;
  Dataset target_eval;
  SplitSpec spec;
};

/// Closed: both domains share all K classes. Partial: the target is
/// restricted to ceil(K*25/65) of them. Open: the target adds ceil(K/3)
/// unknown shape classes, labeled K for evaluation only.
SplitDatasets make_split(SplitMode mode, std::size_t num_classes,
                         std::uint64_t seed, std::size_t train_per_domain = 2000,
                         std::size_t eval_per_domain = 500,
                         const DomainSpec* source_spec = nullptr,
                         const DomainSpec* target_spec = nullptr);

/// One file per dataset: length-prefixed JSON manifest, the manifest's
/// FNV-1a hash, then raw little-endian blobs (f32 images, u8 masks, i32
/// labels). See README for the exact layout.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

/// Writes/loads the four split files (source_train.sfd, source_eval.sfd,
/// target_train.sfd, target_eval.sfd) under a directory.
void save_split(const std::string& dir, const SplitDatasets& split);
SplitDatasets load_split(const std::string& dir);

}  // namespace sfda
