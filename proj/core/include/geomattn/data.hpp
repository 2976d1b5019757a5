#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "geomattn/tensor.hpp"

namespace geomattn {

/// One image with its identity, camera and optional track. `image` is [3,H,W] in [0,1].
struct ReidSample {
  Tensor image;
  int identity = 0;
  int camera = 0;
  std::optional<int> track;
  std::string name;
};

using Dataset = std::vector<ReidSample>;

struct Landmark {
  std::string image;
  std::string name;
  double x = 0.0;
  double y = 0.0;
};

/// Nuisance ranges are half-widths: translation as a fraction of the image side, rotation in
/// degrees, brightness as an additive offset.
struct SyntheticSpec {
  std::size_t num_identities = 20;
  std::size_t images_per_identity = 20;
  std::size_t image_size = 64;
  std::uint64_t seed = 7;
  std::size_t num_cameras = 4;
  double train_fraction = 0.5;
  double max_translation = 0.10;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double max_rotation_deg = 10.0;
  double max_brightness = 0.1;
  double noise_sigma = 0.02;

  void validate() const;
};

/// Identity-specific vehicle sprite in normalized coordinates ([-0.5,0.5]^2, y down).
struct SpriteParams {
  std::array<double, 3> body_color{};
  std::array<double, 3> roof_color{};
  std::array<double, 3> wheel_color{};
  std::array<double, 3> logo_color{};
  double body_width = 0.7;
  double body_height = 0.22;
  double body_center_y = 0.08;
  double roof_bottom_width = 0.45;
  double roof_top_width = 0.3;
  double roof_height = 0.15;
  double roof_offset_x = 0.0;
  double wheel_radius = 0.08;
  double wheel_inset = 0.2;
  double logo_x = 0.3;
  double logo_size = 0.06;
};

struct Nuisance {
  double dx = 0.0;
  double dy = 0.0;
  double scale = 1.0;
  double rotation_rad = 0.0;
  double brightness = 0.0;
  double background = 0.5;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
};

SpriteParams sprite_for_identity(std::uint64_t seed, int identity);

/// Renders the sprite under `nuisance` into a [3,size,size] image. Appends the transformed
/// landmark positions (pixel coordinates) when `landmarks` is non-null.
Tensor render_sprite(const SpriteParams& sprite, const Nuisance& nuisance, std::size_t size,
                     std::vector<Landmark>* landmarks = nullptr, const std::string& image_name = {});

struct SyntheticDataset {
  Dataset train;
  Dataset query;
  Dataset gallery;
  std::vector<Landmark> landmarks;
};

/// Training identities come first; the remaining identities are split into one query image per
/// (identity, camera) and a gallery of the rest. Deterministic in `spec`.
SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec);

/// Writes `images/*.ppm`, `train.csv`, `query.csv`, `gallery.csv` and `landmarks.csv`.
void write_dataset(const std::filesystem::path& dir, const SyntheticDataset& data);

struct DatasetSplits {
  Dataset train;
  Dataset query;
  Dataset gallery;
};

/// Reads `train.csv`, `query.csv` and `gallery.csv` from a dataset directory.
DatasetSplits load_dataset_dir(const std::filesystem::path& dir, std::size_t image_size);

/// Parses a `path,identity,camera[,track]` manifest; images are P5/P6 and are resized to
/// image_size x image_size. Relative paths resolve against the manifest's directory.
Dataset load_manifest(const std::filesystem::path& path, std::size_t image_size);

/// Writes images under `<manifest dir>/images/` and the manifest rows referencing them.
void save_manifest(const std::filesystem::path& path, const Dataset& samples);

/// Whether every row of a manifest-loaded dataset carried a track id.
bool has_tracks(const Dataset& samples);

/// Exact counter-clockwise rotation by k * 90 degrees, k in {0,1,2,3}.
Tensor rotate_image(const Tensor& image, int k);

struct RotationSample {
  Tensor image_rot;
  int pseudo_label = 0;
};

RotationSample make_rotation_sample(const ReidSample& sample, std::mt19937_64& rng);

/// P distinct identities with K images each (drawn with replacement when an identity has fewer
/// than K). Returns dataset indices grouped by identity.
std::vector<std::size_t> pk_sample_batch(const Dataset& dataset, std::size_t p, std::size_t k,
                                         std::mt19937_64& rng);

struct AugmentConfig {
  std::size_t pad = 8;
  double crop_prob = 1.0;
  double flip_prob = 0.5;
  double erase_prob = 0.5;
  double erase_area_min = 0.02;
  double erase_area_max = 0.2;
  double erase_aspect_min = 0.3;
  std::array<double, 3> fill{0.5, 0.5, 0.5};
};

/// Random pad-and-crop, horizontal flip and random erasing. Training images only.
Tensor augment(const Tensor& image, std::mt19937_64& rng, const AugmentConfig& config);

std::array<double, 3> channel_mean(const Dataset& dataset);

/// Maps arbitrary identity labels onto 0..count-1 in ascending identity order.
class LabelMap {
 public:
  explicit LabelMap(const Dataset& dataset);
  int operator()(int identity) const;
  std::size_t size() const { return index_.size(); }

 private:
  std::map<int, int> index_;
};

}  // namespace geomattn
