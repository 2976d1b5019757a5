#include "geomattn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "geomattn/error.hpp"
#include "geomattn/image.hpp"

namespace geomattn {

namespace {

using Color = std::array<double, 3>;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Color random_color(std::mt19937_64& rng, double lo, double hi) {
  return {uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)};
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct Point {
  double x, y;
};

// Colour of the sprite at canonical point p, or nullopt for background.
std::optional<Color> sprite_color(const SpriteParams& s, Point p) {
  const double body_top = s.body_center_y - s.body_height / 2;
  const double body_bottom = s.body_center_y + s.body_height / 2;
  const double half_w = s.body_width / 2;
  const double wheel_y = body_bottom;
  const double wheel_front = half_w - s.wheel_inset * s.body_width;
  const double wheel_rear = -wheel_front;
  for (double wx : {wheel_front, wheel_rear}) {
    const double dx = p.x - wx, dy = p.y - wheel_y;
    if (dx * dx + dy * dy <= s.wheel_radius * s.wheel_radius) return s.wheel_color;
  }
  const double logo_cx = s.logo_x * half_w;
  const double logo_cy = s.body_center_y;
  if (std::abs(p.x - logo_cx) <= s.logo_size / 2 && std::abs(p.y - logo_cy) <= s.logo_size / 2) {
    return s.logo_color;
  }
  if (std::abs(p.x) <= half_w && p.y >= body_top && p.y <= body_bottom) return s.body_color;
  const double roof_bottom = body_top;
  const double roof_top = body_top - s.roof_height;
  if (p.y >= roof_top && p.y < roof_bottom) {
    const double t = (roof_bottom - p.y) / s.roof_height;
    const double half = (s.roof_bottom_width * (1 - t) + s.roof_top_width * t) / 2;
    if (std::abs(p.x - s.roof_offset_x) <= half) return s.roof_color;
  }
  return std::nullopt;
}

std::vector<std::pair<std::string, Point>> sprite_landmarks(const SpriteParams& s) {
  const double half_w = s.body_width / 2;
  const double top = s.body_center_y - s.body_height / 2;
  const double bottom = s.body_center_y + s.body_height / 2;
  const double wheel_front = half_w - s.wheel_inset * s.body_width;
  return {
      {"front_wheel", {wheel_front, bottom}},
      {"rear_wheel", {-wheel_front, bottom}},
      {"body_front_top", {half_w, top}},
      {"body_front_bottom", {half_w, bottom}},
      {"body_rear_top", {-half_w, top}},
      {"body_rear_bottom", {-half_w, bottom}},
      {"logo", {s.logo_x * half_w, s.body_center_y}},
      {"roof_top_center", {s.roof_offset_x, top - s.roof_height}},
  };
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  for (auto& f : out) {
    while (!f.empty() && (f.back() == '\r' || f.back() == ' ')) f.pop_back();
    while (!f.empty() && f.front() == ' ') f.erase(f.begin());
  }
  return out;
}

int parse_int(const std::string& s, const std::string& column, const std::filesystem::path& path,
              std::size_t line) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(path.string() + ":" + std::to_string(line) + ": column '" + column +
                    "' is not an integer: '" + s + "'");
  }
}

Tensor to_three_channels(const Tensor& img) {
  if (img.dim(0) == 3) return img;
  const std::size_t hw = img.dim(1) * img.dim(2);
  std::vector<double> out(3 * hw);
  for (std::size_t ch = 0; ch < 3; ++ch) std::copy_n(img.data().begin(), hw, out.begin() + ch * hw);
  return Tensor({3, img.dim(1), img.dim(2)}, std::move(out));
}

}  // namespace

void SyntheticSpec::validate() const {
  if (num_identities < 2) throw ConfigError("synthetic data needs at least 2 identities");
  if (images_per_identity < 4) throw ConfigError("synthetic data needs at least 4 images per identity");
  if (image_size < 8 || image_size % 8 != 0) throw ConfigError("synthetic image size must be a multiple of 8");
  if (num_cameras == 0) throw ConfigError("synthetic data needs at least one camera");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0,1)");
  if (!(max_translation >= 0.0 && max_translation <= 0.1)) throw ConfigError("translation must lie in [0, 0.1]");
  if (!(scale_min > 0.0 && scale_min <= scale_max)) throw ConfigError("invalid scale range");
  if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= 10.0)) throw ConfigError("rotation must lie in [0, 10] degrees");
  if (!(max_brightness >= 0.0 && max_brightness <= 0.1)) throw ConfigError("brightness must lie in [0, 0.1]");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise sigma must be non-negative");
}

SpriteParams sprite_for_identity(std::uint64_t seed, int identity) {
  std::mt19937_64 rng(mix(seed, 0x5eed0000ULL + static_cast<std::uint64_t>(identity)));
  SpriteParams s;
  s.body_color = random_color(rng, 0.1, 0.95);
  s.roof_color = random_color(rng, 0.1, 0.95);
  const double wheel = uniform(rng, 0.02, 0.2);
  s.wheel_color = {wheel, wheel, wheel};
  s.logo_color = random_color(rng, 0.0, 1.0);
  s.body_width = uniform(rng, 0.55, 0.78);
  s.body_height = uniform(rng, 0.16, 0.28);
  s.body_center_y = uniform(rng, 0.04, 0.1);
  s.roof_bottom_width = s.body_width * uniform(rng, 0.45, 0.75);
  s.roof_top_width = s.roof_bottom_width * uniform(rng, 0.5, 0.9);
  s.roof_height = uniform(rng, 0.1, 0.18);
  s.roof_offset_x = uniform(rng, -0.08, 0.08);
  s.wheel_radius = uniform(rng, 0.06, 0.095);
  s.wheel_inset = uniform(rng, 0.15, 0.24);
  s.logo_x = uniform(rng, -0.7, 0.7);
  s.logo_size = uniform(rng, 0.04, 0.08);
  return s;
}

Tensor render_sprite(const SpriteParams& sprite, const Nuisance& nz, std::size_t size,
                     std::vector<Landmark>* landmarks, const std::string& image_name) {
  const double c = std::cos(nz.rotation_rad), s = std::sin(nz.rotation_rad);
  const double side = static_cast<double>(size);
  std::vector<double> out(3 * size * size);
  std::mt19937_64 noise_rng(nz.noise_seed);
  std::normal_distribution<double> noise(0.0, nz.noise_sigma > 0.0 ? nz.noise_sigma : 1.0);
  constexpr int kSuper = 2;
  for (std::size_t py = 0; py < size; ++py) {
    for (std::size_t px = 0; px < size; ++px) {
      Color acc{0, 0, 0};
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double u = (static_cast<double>(px) + (sx + 0.5) / kSuper) / side - 0.5 - nz.dx;
          const double v = (static_cast<double>(py) + (sy + 0.5) / kSuper) / side - 0.5 - nz.dy;
          // Inverse of rotate-then-scale.
          const Point q{(c * u + s * v) / nz.scale, (-s * u + c * v) / nz.scale};
          const auto col = sprite_color(sprite, q);
          for (std::size_t ch = 0; ch < 3; ++ch) acc[ch] += col ? (*col)[ch] : nz.background;
        }
      }
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double v = acc[ch] / (kSuper * kSuper) + nz.brightness;
        if (nz.noise_sigma > 0.0) v += noise(noise_rng);
        out[(ch * size + py) * size + px] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  if (landmarks) {
    for (const auto& [name, p] : sprite_landmarks(sprite)) {
      const double u = nz.scale * (c * p.x - s * p.y) + nz.dx;
      const double v = nz.scale * (s * p.x + c * p.y) + nz.dy;
      landmarks->push_back({image_name, name, (u + 0.5) * side - 0.5, (v + 0.5) * side - 0.5});
    }
  }
  return Tensor({3, size, size}, std::move(out));
}

SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t cameras = std::max<std::size_t>(1, std::min(spec.num_cameras, spec.images_per_identity / 2));
  const std::size_t train_ids = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(spec.train_fraction * static_cast<double>(spec.num_identities))), 1,
      spec.num_identities - 1);

  // Each camera is a nuisance cluster: a fixed view offset plus small per-image jitter.
  struct CameraView {
    double dx, dy, rotation, brightness, scale, background;
  };
  std::vector<CameraView> views;
  {
    std::mt19937_64 rng(mix(spec.seed, 0xca3e7aULL));
    const double max_rot = spec.max_rotation_deg * std::numbers::pi / 180.0;
    const double mid_scale = 0.5 * (spec.scale_min + spec.scale_max);
    const double half_scale = 0.5 * (spec.scale_max - spec.scale_min);
    for (std::size_t cam = 0; cam < cameras; ++cam) {
      views.push_back({uniform(rng, -0.6, 0.6) * spec.max_translation, uniform(rng, -0.6, 0.6) * spec.max_translation,
                       uniform(rng, -0.6, 0.6) * max_rot, uniform(rng, -0.6, 0.6) * spec.max_brightness,
                       mid_scale + uniform(rng, -0.6, 0.6) * half_scale, uniform(rng, 0.35, 0.65)});
    }
  }

  SyntheticDataset data;
  const std::size_t per_camera = spec.images_per_identity / cameras;
  for (std::size_t id = 0; id < spec.num_identities; ++id) {
    const SpriteParams sprite = sprite_for_identity(spec.seed, static_cast<int>(id));
    std::mt19937_64 rng(mix(spec.seed, 0x1a6e0000ULL + id));
    const bool is_train = id < train_ids;
    for (std::size_t j = 0; j < spec.images_per_identity; ++j) {
      const std::size_t cam = std::min(j / std::max<std::size_t>(1, per_camera), cameras - 1);
      const CameraView& view = views[cam];
      const double max_rot = spec.max_rotation_deg * std::numbers::pi / 180.0;
      Nuisance nz;
      nz.dx = std::clamp(view.dx + uniform(rng, -0.4, 0.4) * spec.max_translation, -spec.max_translation,
                         spec.max_translation);
      nz.dy = std::clamp(view.dy + uniform(rng, -0.4, 0.4) * spec.max_translation, -spec.max_translation,
                         spec.max_translation);
      nz.rotation_rad = std::clamp(view.rotation + uniform(rng, -0.4, 0.4) * max_rot, -max_rot, max_rot);
      nz.brightness = std::clamp(view.brightness + uniform(rng, -0.4, 0.4) * spec.max_brightness,
                                 -spec.max_brightness, spec.max_brightness);
      nz.scale = std::clamp(view.scale + uniform(rng, -0.2, 0.2) * (spec.scale_max - spec.scale_min),
                            spec.scale_min, spec.scale_max);
      nz.background = view.background;
      nz.noise_sigma = spec.noise_sigma;
      nz.noise_seed = rng();

      char name[64];
      std::snprintf(name, sizeof(name), "id%04zu_c%zu_%03zu", id, cam, j);
      ReidSample sample;
      sample.image = render_sprite(sprite, nz, spec.image_size, &data.landmarks, std::string("images/") + name + ".ppm");
      sample.identity = static_cast<int>(id);
      sample.camera = static_cast<int>(cam);
      sample.track = static_cast<int>(id * cameras + cam);
      sample.name = name;
      if (is_train) {
        data.train.push_back(std::move(sample));
      } else if (j % per_camera == 0 && j / per_camera < cameras) {
        data.query.push_back(std::move(sample));
      } else {
        data.gallery.push_back(std::move(sample));
      }
    }
  }
  return data;
}

void write_dataset(const std::filesystem::path& dir, const SyntheticDataset& data) {
  std::filesystem::create_directories(dir);
  save_manifest(dir / "train.csv", data.train);
  save_manifest(dir / "query.csv", data.query);
  save_manifest(dir / "gallery.csv", data.gallery);
  std::ofstream out(dir / "landmarks.csv");
  if (!out) throw DataError("cannot write " + (dir / "landmarks.csv").string());
  out << "path,landmark,x,y\n";
  out.precision(17);
  for (const auto& l : data.landmarks) out << l.image << ',' << l.name << ',' << l.x << ',' << l.y << '\n';
}

DatasetSplits load_dataset_dir(const std::filesystem::path& dir, std::size_t image_size) {
  if (!std::filesystem::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  return {load_manifest(dir / "train.csv", image_size), load_manifest(dir / "query.csv", image_size),
          load_manifest(dir / "gallery.csv", image_size)};
}

Dataset load_manifest(const std::filesystem::path& path, std::size_t image_size) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest not found: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty manifest: " + path.string());
  const std::vector<std::string> header = split_csv(line);
  static const std::array<const char*, 4> expected{"path", "identity", "camera", "track"};
  if (header.size() < 3 || header.size() > 4) {
    throw DataError(path.string() + ": header must be path,identity,camera[,track]");
  }
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] != expected[i]) {
      throw DataError(path.string() + ": header column " + std::to_string(i + 1) + " is '" + header[i] +
                      "', expected '" + expected[i] + "'");
    }
  }
  const bool with_track = header.size() == 4;
  const std::filesystem::path base = path.parent_path();
  Dataset samples;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> f = split_csv(line);
    if (f.size() < 3 || f.size() > header.size()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " fields");
    }
    ReidSample s;
    std::filesystem::path img = f[0];
    if (img.is_relative()) img = base / img;
    Tensor raw = read_pnm(img);
    s.image = resize_bilinear(to_three_channels(raw), image_size, image_size);
    s.identity = parse_int(f[1], "identity", path, line_no);
    s.camera = parse_int(f[2], "camera", path, line_no);
    if (s.identity < 0 || s.camera < 0) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": identity and camera must be >= 0");
    }
    if (with_track && f.size() == 4 && !f[3].empty()) s.track = parse_int(f[3], "track", path, line_no);
    s.name = std::filesystem::path(f[0]).stem().string();
    samples.push_back(std::move(s));
  }
  return samples;
}

void save_manifest(const std::filesystem::path& path, const Dataset& samples) {
  const std::filesystem::path dir = path.parent_path().empty() ? "." : path.parent_path();
  std::filesystem::create_directories(dir / "images");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << "path,identity,camera,track\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ReidSample& s = samples[i];
    const std::string stem = s.name.empty() ? "img" + std::to_string(i) : s.name;
    const std::string rel = "images/" + stem + ".ppm";
    write_ppm(dir / rel, s.image);
    out << rel << ',' << s.identity << ',' << s.camera << ',';
    if (s.track) out << *s.track;
    out << '\n';
  }
  if (!out) throw DataError("failed writing manifest " + path.string());
}

bool has_tracks(const Dataset& samples) {
  return !samples.empty() &&
         std::all_of(samples.begin(), samples.end(), [](const ReidSample& s) { return s.track.has_value(); });
}

Tensor rotate_image(const Tensor& image, int k) {
  if (k < 0 || k > 3) throw ConfigError("rotation index must be 0, 1, 2 or 3");
  return rotate90(image, k);
}

RotationSample make_rotation_sample(const ReidSample& sample, std::mt19937_64& rng) {
  const int k = std::uniform_int_distribution<int>(0, 3)(rng);
  return {rotate_image(sample.image, k), k};
}

std::vector<std::size_t> pk_sample_batch(const Dataset& dataset, std::size_t p, std::size_t k,
                                         std::mt19937_64& rng) {
  std::map<int, std::vector<std::size_t>> by_identity;
  for (std::size_t i = 0; i < dataset.size(); ++i) by_identity[dataset[i].identity].push_back(i);
  if (by_identity.size() < p) {
    throw DataError("P x K sampling needs " + std::to_string(p) + " identities, dataset has " +
                    std::to_string(by_identity.size()));
  }
  if (k == 0) throw ConfigError("K must be positive");
  std::vector<int> ids;
  for (const auto& [id, _] : by_identity) ids.push_back(id);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(p);
  std::vector<std::size_t> batch;
  batch.reserve(p * k);
  for (int id : ids) {
    std::vector<std::size_t> pool = by_identity[id];
    if (pool.size() >= k) {
      std::shuffle(pool.begin(), pool.end(), rng);
      batch.insert(batch.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      for (std::size_t j = 0; j < k; ++j) batch.push_back(pool[pick(rng)]);
    }
  }
  return batch;
}

Tensor augment(const Tensor& image, std::mt19937_64& rng, const AugmentConfig& config) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  Tensor out = image;
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (config.pad > 0 && coin(rng) < config.crop_prob) {
    std::uniform_int_distribution<std::size_t> offset(0, 2 * config.pad);
    const std::size_t top = offset(rng);
    const std::size_t left = offset(rng);
    out = pad_reflect_crop(out, config.pad, top, left);
  }
  if (coin(rng) < config.flip_prob) out = flip_horizontal(out);
  if (coin(rng) < config.erase_prob) {
    const double area = static_cast<double>(h * w);
    for (int attempt = 0; attempt < 10; ++attempt) {
      const double target = uniform(rng, config.erase_area_min, config.erase_area_max) * area;
      const double aspect =
          std::exp(uniform(rng, std::log(config.erase_aspect_min), std::log(1.0 / config.erase_aspect_min)));
      const auto eh = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
      const auto ew = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
      if (eh == 0 || ew == 0 || eh >= h || ew >= w) continue;
      Rect r{std::uniform_int_distribution<std::size_t>(0, h - eh)(rng),
             std::uniform_int_distribution<std::size_t>(0, w - ew)(rng), eh, ew};
      out = erase_rect(out, r, config.fill);
      break;
    }
  }
  return out;
}

std::array<double, 3> channel_mean(const Dataset& dataset) {
  std::array<double, 3> sum{0, 0, 0};
  std::size_t count = 0;
  for (const auto& s : dataset) {
    const std::size_t hw = s.image.dim(1) * s.image.dim(2);
    auto v = s.image.data();
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t i = 0; i < hw; ++i) sum[ch] += v[ch * hw + i];
    count += hw;
  }
  if (count == 0) return {0.5, 0.5, 0.5};
  for (double& x : sum) x /= static_cast<double>(count);
  return sum;
}

LabelMap::LabelMap(const Dataset& dataset) {
  std::set<int> ids;
  for (const auto& s : dataset) ids.insert(s.identity);
  int next = 0;
  for (int id : ids) index_[id] = next++;
}

int LabelMap::operator()(int identity) const {
  auto it = index_.find(identity);
  if (it == index_.end()) throw DataError("identity " + std::to_string(identity) + " not in training set");
  return it->second;
}

}  // namespace geomattn
