#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vmrfa/errors.hpp"
#include "vmrfa/rng.hpp"
#include "vmrfa/tensor.hpp"

namespace vmrfa {

// --- PPM / PGM images --------------------------------------------------------

namespace detail {

inline int ppm_token(std::istream& in, const std::string& path) {
  // skips whitespace and '#' comments between header fields
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF || !std::isdigit(c)) {
    fail<DataError>(path, ": malformed PPM header");
  }
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = in.get();
  }
  return value;
}

}  // namespace detail

// Decodes an 8-bit binary P6 image to a 3 x H x W tensor in [0, 1].
inline Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail<DataError>(path, ": cannot open image");
  char p = 0, six = 0;
  in.get(p);
  in.get(six);
  if (p != 'P' || six != '6') fail<DataError>(path, ": not a binary P6 image");
  const int width = detail::ppm_token(in, path);
  const int height = detail::ppm_token(in, path);
  const int maxval = detail::ppm_token(in, path);
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 255) {
    fail<DataError>(path, ": unsupported PPM geometry ", width, "x", height,
                    " maxval ", maxval);
  }
  const std::int64_t pixels = static_cast<std::int64_t>(width) * height;
  std::vector<unsigned char> raw(static_cast<std::size_t>(pixels) * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) fail<DataError>(path, ": truncated pixel data");
  Tensor out(Shape{3, height, width});
  const float inv = 1.0f / static_cast<float>(maxval);
  for (std::int64_t i = 0; i < pixels; ++i) {
    for (int c = 0; c < 3; ++c) {
      out[static_cast<std::int64_t>(c) * pixels + i] =
          static_cast<float>(raw[static_cast<std::size_t>(i * 3 + c)]) * inv;
    }
  }
  return out;
}

inline void write_ppm(const std::string& path, const Tensor& pixels) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3) {
    fail<DimensionError>("write_ppm: need 3 x H x W, got ", shape_str(pixels.shape()));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail<IoError>("cannot open ", path, " for writing");
  const int height = pixels.dim(1), width = pixels.dim(2);
  out << "P6\n" << width << " " << height << "\n255\n";
  const std::int64_t plane = static_cast<std::int64_t>(height) * width;
  std::vector<unsigned char> raw(static_cast<std::size_t>(plane) * 3);
  for (std::int64_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(pixels[c * plane + i], 0.0f, 1.0f);
      raw[static_cast<std::size_t>(i * 3 + c)] =
          static_cast<unsigned char>(std::lround(v * 255.0f));
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size()));
  if (!out) fail<IoError>("write failed for ", path);
}

// 8-bit grayscale P5 dump of a 2-D map, min-max scaled over the map.
inline void write_pgm(const std::string& path, const Tensor& map) {
  if (map.rank() != 2) {
    fail<DimensionError>("write_pgm: need H x W, got ", shape_str(map.shape()));
  }
  float lo = map[0], hi = map[0];
  for (std::int64_t i = 1; i < map.numel(); ++i) {
    lo = std::min(lo, map[i]);
    hi = std::max(hi, map[i]);
  }
  const float span = hi > lo ? hi - lo : 1.0f;
  std::ofstream out(path, std::ios::binary);
  if (!out) fail<IoError>("cannot open ", path, " for writing");
  out << "P5\n" << map.dim(1) << " " << map.dim(0) << "\n255\n";
  for (std::int64_t i = 0; i < map.numel(); ++i) {
    const float v = (map[i] - lo) / span;
    out.put(static_cast<char>(std::lround(v * 255.0f)));
  }
}

// --- dataset -----------------------------------------------------------------

// A decoded training sample.
struct LabeledImage {
  Tensor pixels;  // 3 x H x W in [0, 1]
  int person_id = 0;
  int camera_id = 0;
  std::string path;
};

struct ImageRecord {
  std::string path;
  int person_id = 0;  // contiguous re-indexed label
  int camera_id = 0;
  int original_person_id = 0;
};

struct Dataset {
  std::vector<ImageRecord> records;
  int num_identities = 0;
  int num_cameras = 0;

  LabeledImage load(std::size_t index) const {
    const ImageRecord& rec = records[index];
    return LabeledImage{read_ppm(rec.path), rec.person_id, rec.camera_id, rec.path};
  }
};

// Reads a `path,person_id,camera_id` manifest. Person ids are re-indexed to a
// contiguous [0, n) range ordered by original id. Image paths are resolved
// relative to the manifest location and decoded lazily.
inline Dataset load_manifest(const std::string& manifest_path,
                             std::optional<int> expect_cameras = std::nullopt) {
  std::ifstream in(manifest_path);
  if (!in) fail<DataError>("cannot open manifest ", manifest_path);
  const std::filesystem::path base =
      std::filesystem::path(manifest_path).parent_path();

  std::string line;
  if (!std::getline(in, line)) fail<DataError>(manifest_path, ": empty manifest");
  if (line != "path,person_id,camera_id") {
    fail<DataError>(manifest_path, ": row 0: expected header 'path,person_id,camera_id'");
  }

  Dataset ds;
  int row = 0;
  int max_camera = -1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string path_field, pid_field, cam_field;
    if (!std::getline(fields, path_field, ',') || !std::getline(fields, pid_field, ',') ||
        !std::getline(fields, cam_field)) {
      fail<DataError>(manifest_path, ": row ", row, ": malformed row '", line, "'");
    }
    ImageRecord rec;
    try {
      rec.original_person_id = std::stoi(pid_field);
      rec.camera_id = std::stoi(cam_field);
    } catch (const std::exception&) {
      fail<DataError>(manifest_path, ": row ", row, ": non-numeric id in '", line, "'");
    }
    if (rec.original_person_id < 0) {
      fail<DataError>(manifest_path, ": row ", row, ": negative person id");
    }
    if (rec.camera_id < 0 || (expect_cameras && rec.camera_id >= *expect_cameras)) {
      fail<DataError>(manifest_path, ": row ", row, ": camera id ", rec.camera_id,
                      " outside [0, ", expect_cameras ? *expect_cameras : 0, ")");
    }
    rec.path = (base / path_field).string();
    max_camera = std::max(max_camera, rec.camera_id);
    ds.records.push_back(std::move(rec));
  }
  if (ds.records.empty()) fail<DataError>(manifest_path, ": empty dataset");

  std::map<int, int> reindex;
  for (const ImageRecord& rec : ds.records) reindex.emplace(rec.original_person_id, 0);
  int next = 0;
  for (auto& [orig, fresh] : reindex) fresh = next++;
  for (ImageRecord& rec : ds.records) rec.person_id = reindex[rec.original_person_id];
  ds.num_identities = next;
  ds.num_cameras = expect_cameras ? *expect_cameras : max_camera + 1;
  return ds;
}

// --- synthetic data ----------------------------------------------------------

namespace detail {

struct CameraStyle {
  float tint[3];
  float brightness;
  float background;
  int pattern;  // 0 plain, 1 horizontal gradient, 2 vertical gradient, 3 checker
  int y_offset_div;
};

inline CameraStyle camera_style(int cam) {
  static const CameraStyle kStyles[] = {
      {{1.18f, 0.92f, 0.92f}, 0.05f, 0.78f, 0, 0},
      {{0.90f, 1.16f, 0.90f}, -0.06f, 0.34f, 1, 18},
      {{0.90f, 0.90f, 1.18f}, 0.02f, 0.56f, 2, -18},
      {{1.14f, 1.10f, 0.82f}, -0.03f, 0.88f, 3, 14},
      {{0.84f, 1.08f, 1.12f}, 0.06f, 0.45f, 1, -14},
      {{1.10f, 0.86f, 1.12f}, -0.08f, 0.66f, 2, 20},
      {{1.16f, 1.00f, 0.84f}, 0.03f, 0.25f, 3, -20},
      {{0.86f, 0.98f, 1.16f}, -0.04f, 0.72f, 0, 16},
  };
  return kStyles[static_cast<std::size_t>(cam) % 8];
}

inline void hue_to_rgb(float hue, float rgb[3]) {
  const float h = hue * 6.0f;
  const float x = 1.0f - std::fabs(std::fmod(h, 2.0f) - 1.0f);
  const float table[6][3] = {{1, x, 0}, {x, 1, 0}, {0, 1, x},
                             {0, x, 1}, {x, 0, 1}, {1, 0, x}};
  const int k = std::min(5, static_cast<int>(h));
  for (int c = 0; c < 3; ++c) rgb[c] = table[k][c];
}

}  // namespace detail

// Renders a procedural person: identity-specific torso/leg colors and a
// torso stripe frequency on a vertical figure, camera-specific tint,
// brightness, background pattern and vertical offset. Identities stay
// separable across cameras while the camera is recoverable from global
// color statistics.
inline Tensor synth_render(int person_id, int camera_id, int variant, int height,
                           int width, std::uint64_t seed) {
  Rng id_rng = Rng::stream(seed, 0x1dULL, static_cast<std::uint64_t>(person_id));
  float torso[3], legs[3];
  const float hue = static_cast<float>(std::fmod(0.13 + 0.618033988749895 * person_id, 1.0));
  const float hue2 = static_cast<float>(std::fmod(hue + 0.37 + 0.1 * id_rng.uniform(), 1.0));
  detail::hue_to_rgb(hue, torso);
  detail::hue_to_rgb(hue2, legs);
  const float torso_level = 0.55f + 0.4f * id_rng.uniform_f();
  const float legs_level = 0.35f + 0.4f * id_rng.uniform_f();
  const float stripe_freq = 3.0f + static_cast<float>(id_rng.uniform_int(6));
  const float stripe_phase = static_cast<float>(id_rng.uniform(0.0, 6.283185));
  const float stripe_amp = 0.10f + 0.10f * id_rng.uniform_f();

  Rng img_rng = Rng::stream(seed, 0x313dULL, static_cast<std::uint64_t>(person_id),
                            static_cast<std::uint64_t>(camera_id),
                            static_cast<std::uint64_t>(variant));
  const detail::CameraStyle style = detail::camera_style(camera_id);

  const float cx = 0.5f + 0.08f * (img_rng.uniform_f() - 0.5f);
  const float body_w = 0.46f + 0.10f * img_rng.uniform_f();
  const int y_shift =
      (style.y_offset_div != 0 ? height / style.y_offset_div : 0) +
      static_cast<int>(img_rng.uniform_int(5)) - 2;

  Tensor img(Shape{3, height, width});
  const std::int64_t plane = static_cast<std::int64_t>(height) * width;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      float bg = style.background;
      const float fx = static_cast<float>(x) / width;
      const float fy = static_cast<float>(y) / height;
      if (style.pattern == 1) bg += 0.22f * (fx - 0.5f);
      if (style.pattern == 2) bg += 0.22f * (fy - 0.5f);
      if (style.pattern == 3) bg += (((x / 6) + (y / 6)) % 2 == 0) ? 0.07f : -0.07f;
      const float noise = 0.05f * (img_rng.uniform_f() - 0.5f);

      float rgb[3] = {bg + noise, bg + noise, bg + noise};
      const int by = y - y_shift;
      const float byf = static_cast<float>(by) / height;
      const float half_w = 0.5f * body_w;
      const bool in_column = std::fabs(fx - cx) < half_w;
      if (in_column && byf >= 0.04f && byf < 0.18f) {
        const float head = std::fabs(fx - cx) < 0.55f * half_w ? 1.0f : 0.0f;
        if (head > 0.0f) {
          rgb[0] = 0.85f;
          rgb[1] = 0.70f;
          rgb[2] = 0.58f;
        }
      } else if (in_column && byf >= 0.18f && byf < 0.56f) {
        const float stripe =
            1.0f + stripe_amp * std::sin(stripe_freq * 6.2831853f * byf + stripe_phase);
        for (int c = 0; c < 3; ++c) rgb[c] = torso[c] * torso_level * stripe;
      } else if (in_column && byf >= 0.56f && byf < 0.95f &&
                 std::fabs(fx - cx) < 0.8f * half_w) {
        for (int c = 0; c < 3; ++c) rgb[c] = legs[c] * legs_level;
      }

      for (int c = 0; c < 3; ++c) {
        const float v = rgb[c] * style.tint[c] + style.brightness;
        img[c * plane + y * width + x] = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return img;
}

// Generates a deterministic synthetic dataset and writes a manifest next to
// the images. Cameras are assigned round-robin over each identity's images.
inline std::string synth_generate(int num_ids, int num_cams, int imgs_per_id,
                                  int height, int width, std::uint64_t seed,
                                  const std::string& out_dir) {
  if (num_ids <= 0 || num_cams <= 0 || imgs_per_id <= 0 || height <= 0 || width <= 0) {
    fail<ConfigError>("synth_generate: all counts must be positive");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail<IoError>("cannot create directory ", out_dir, ": ", ec.message());

  const std::string manifest_path =
      (std::filesystem::path(out_dir) / "manifest.csv").string();
  std::ofstream manifest(manifest_path);
  if (!manifest) fail<IoError>("cannot open ", manifest_path, " for writing");
  manifest << "path,person_id,camera_id\n";
  for (int id = 0; id < num_ids; ++id) {
    for (int j = 0; j < imgs_per_id; ++j) {
      const int cam = j % num_cams;
      Tensor img = synth_render(id, cam, j, height, width, seed);
      const std::string name =
          detail::concat("id", id, "_cam", cam, "_", j, ".ppm");
      write_ppm((std::filesystem::path(out_dir) / name).string(), img);
      manifest << name << "," << id << "," << cam << "\n";
    }
  }
  if (!manifest) fail<IoError>("write failed for ", manifest_path);
  return manifest_path;
}

// --- Gaussian horizontal data augmentation ------------------------------------

struct HdaConfig {
  float sigma = 0.05f;
  float clip = 0.15f;
  float apply_prob = 0.4f;

  void validate() const {
    if (apply_prob < 0.0f || apply_prob > 1.0f) {
      fail<ConfigError>("hda: apply_prob must lie in [0, 1], got ", apply_prob);
    }
    if (clip <= 0.0f || sigma < 0.0f) {
      fail<ConfigError>("hda: clip must be positive and sigma non-negative");
    }
  }
};

struct HdaDecision {
  bool applied = false;
  float fraction = 0.0f;  // min(|g|, clip)
  bool crop = false;      // crop when the draw is negative, otherwise pad
  bool top = false;       // side chosen by an independent fair coin
};

inline HdaDecision hda_decide(const HdaConfig& config, Rng& rng) {
  config.validate();
  HdaDecision d;
  if (rng.uniform() >= config.apply_prob) return d;
  d.applied = true;
  const float g = rng.normal_f(0.0f, config.sigma);
  d.fraction = std::min(std::fabs(g), config.clip);
  d.crop = g < 0.0f;
  d.top = rng.coin();
  return d;
}

// Crops or pads the top or bottom by round(fraction * H) rows. Padding is
// filled with the per-channel image mean.
inline Tensor hda_apply(const Tensor& pixels, const HdaDecision& d) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3) {
    fail<DimensionError>("hda: need 3 x H x W, got ", shape_str(pixels.shape()));
  }
  const int height = pixels.dim(1), width = pixels.dim(2);
  if (height < 8) fail<ContractError>("hda: image height ", height, " below 8 rows");
  if (!d.applied) return pixels;
  const int rows = static_cast<int>(std::lround(d.fraction * height));
  if (rows == 0) return pixels;

  if (d.crop) {
    const int new_h = height - rows;
    Tensor out(Shape{3, new_h, width});
    const int src_row0 = d.top ? rows : 0;
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < new_h; ++y) {
        const float* src =
            pixels.data() + (static_cast<std::int64_t>(c) * height + src_row0 + y) * width;
        std::copy(src, src + width,
                  out.data() + (static_cast<std::int64_t>(c) * new_h + y) * width);
      }
    }
    return out;
  }

  float mean[3];
  const std::int64_t plane = static_cast<std::int64_t>(height) * width;
  for (int c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) s += pixels[c * plane + i];
    mean[c] = static_cast<float>(s / static_cast<double>(plane));
  }
  const int new_h = height + rows;
  Tensor out(Shape{3, new_h, width});
  const int dst_row0 = d.top ? rows : 0;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < new_h; ++y) {
      float* dst = out.data() + (static_cast<std::int64_t>(c) * new_h + y) * width;
      const int sy = y - dst_row0;
      if (sy < 0 || sy >= height) {
        std::fill(dst, dst + width, mean[c]);
      } else {
        const float* src =
            pixels.data() + (static_cast<std::int64_t>(c) * height + sy) * width;
        std::copy(src, src + width, dst);
      }
    }
  }
  return out;
}

inline LabeledImage hda_augment(const LabeledImage& image, const HdaConfig& config,
                                Rng& rng) {
  LabeledImage out = image;
  out.pixels = hda_apply(image.pixels, hda_decide(config, rng));
  return out;
}

// --- augmentation chain --------------------------------------------------------

// Bilinear resize with half-pixel coordinate mapping.
inline Tensor resize_bilinear(const Tensor& pixels, int out_h, int out_w) {
  if (pixels.rank() != 3) {
    fail<DimensionError>("resize: need C x H x W, got ", shape_str(pixels.shape()));
  }
  const int channels = pixels.dim(0), in_h = pixels.dim(1), in_w = pixels.dim(2);
  Tensor out(Shape{channels, out_h, out_w});
  const float sy = static_cast<float>(in_h) / out_h;
  const float sx = static_cast<float>(in_w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const float fy = std::max(0.0f, (y + 0.5f) * sy - 0.5f);
    const int y0 = std::min(in_h - 1, static_cast<int>(fy));
    const int y1 = std::min(in_h - 1, y0 + 1);
    const float wy = fy - static_cast<float>(y0);
    for (int x = 0; x < out_w; ++x) {
      const float fx = std::max(0.0f, (x + 0.5f) * sx - 0.5f);
      const int x0 = std::min(in_w - 1, static_cast<int>(fx));
      const int x1 = std::min(in_w - 1, x0 + 1);
      const float wx = fx - static_cast<float>(x0);
      for (int c = 0; c < channels; ++c) {
        const float* plane = pixels.data() + static_cast<std::int64_t>(c) * in_h * in_w;
        const float top = plane[y0 * in_w + x0] * (1 - wx) + plane[y0 * in_w + x1] * wx;
        const float bot = plane[y1 * in_w + x0] * (1 - wx) + plane[y1 * in_w + x1] * wx;
        out[(static_cast<std::int64_t>(c) * out_h + y) * out_w + x] =
            top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

inline void flip_horizontal(Tensor& pixels) {
  const int channels = pixels.dim(0), height = pixels.dim(1), width = pixels.dim(2);
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < height; ++y) {
      float* row = pixels.data() + (static_cast<std::int64_t>(c) * height + y) * width;
      std::reverse(row, row + width);
    }
  }
}

struct EraseRegion {
  int y = 0, x = 0, h = 0, w = 0;
};

// Samples a rectangle with area ratio in [0.02, 0.4] and aspect ratio in
// [0.3, 3.33]; resamples until the rounded rectangle fits and stays in range.
inline std::optional<EraseRegion> sample_erase_region(int height, int width, Rng& rng) {
  const float area = static_cast<float>(height) * width;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const float target = static_cast<float>(rng.uniform(0.02, 0.4)) * area;
    const float ratio = static_cast<float>(rng.uniform(0.3, 3.33));
    const int h = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int w = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (h < 1 || w < 1 || h >= height || w >= width) continue;
    const float got = static_cast<float>(h) * w / area;
    if (got < 0.02f || got > 0.4f) continue;
    EraseRegion r;
    r.h = h;
    r.w = w;
    r.y = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(height - h + 1)));
    r.x = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(width - w + 1)));
    return r;
  }
  return std::nullopt;
}

inline void erase_region(Tensor& pixels, const EraseRegion& r) {
  const int channels = pixels.dim(0), height = pixels.dim(1), width = pixels.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(height) * width;
  for (int c = 0; c < channels; ++c) {
    double s = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) s += pixels[c * plane + i];
    const float mean = static_cast<float>(s / static_cast<double>(plane));
    for (int y = r.y; y < r.y + r.h; ++y) {
      float* row = pixels.data() + (c * plane + static_cast<std::int64_t>(y) * width);
      std::fill(row + r.x, row + r.x + r.w, mean);
    }
  }
}

inline constexpr float kPixelMean = 0.5f;
inline constexpr float kPixelStd = 0.25f;

inline void standardize(Tensor& pixels) {
  for (std::int64_t i = 0; i < pixels.numel(); ++i) {
    pixels[i] = (pixels[i] - kPixelMean) / kPixelStd;
  }
}

// Train: HDA -> bilinear resize -> horizontal flip p=0.5 -> random erasing
// p=0.5 -> standardize. Eval: resize -> standardize. HDA runs before the
// resize so the crop/pad fraction refers to the original detection box.
inline Tensor augment_chain(const LabeledImage& image, const HdaConfig& hda,
                            int net_height, int net_width, bool train_mode, Rng& rng) {
  Tensor pixels = image.pixels;
  if (train_mode) {
    pixels = hda_apply(pixels, hda_decide(hda, rng));
  }
  pixels = resize_bilinear(pixels, net_height, net_width);
  if (train_mode) {
    if (rng.uniform() < 0.5) flip_horizontal(pixels);
    if (rng.uniform() < 0.5) {
      if (auto region = sample_erase_region(net_height, net_width, rng)) {
        erase_region(pixels, *region);
      }
    }
  }
  standardize(pixels);
  return pixels;
}

// --- P x K batch sampling -------------------------------------------------------

struct BatchSpec {
  int p = 24;
  int k = 4;
  std::uint64_t seed = 0;
};

class PkSampler {
 public:
  PkSampler(const Dataset& dataset, BatchSpec spec)
      : dataset_(&dataset), spec_(spec), by_identity_(static_cast<std::size_t>(dataset.num_identities)) {
    if (dataset.num_identities < spec.p) {
      fail<DataError>("pk_sample: dataset has ", dataset.num_identities,
                      " identities, need at least P = ", spec.p);
    }
    for (std::size_t i = 0; i < dataset.records.size(); ++i) {
      by_identity_[static_cast<std::size_t>(dataset.records[i].person_id)].push_back(
          static_cast<int>(i));
    }
  }

  const BatchSpec& spec() const { return spec_; }

  int steps_per_epoch() const {
    return std::max<int>(
        1, static_cast<int>(dataset_->records.size()) / (spec_.p * spec_.k));
  }

  // Record indices for one batch: P identities without replacement, K images
  // each (with replacement only when an identity has fewer than K images).
  // Fully determined by (seed, epoch, step).
  std::vector<int> sample(int epoch, int step) const {
    Rng rng = Rng::stream(spec_.seed, 0x706bULL, static_cast<std::uint64_t>(epoch),
                          static_cast<std::uint64_t>(step));
    std::vector<int> ids(by_identity_.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    rng.shuffle(ids);
    ids.resize(static_cast<std::size_t>(spec_.p));

    std::vector<int> batch;
    batch.reserve(static_cast<std::size_t>(spec_.p * spec_.k));
    for (int id : ids) {
      const std::vector<int>& pool = by_identity_[static_cast<std::size_t>(id)];
      if (static_cast<int>(pool.size()) >= spec_.k) {
        std::vector<int> order = pool;
        rng.shuffle(order);
        for (int j = 0; j < spec_.k; ++j) batch.push_back(order[static_cast<std::size_t>(j)]);
      } else {
        for (int j = 0; j < spec_.k; ++j) {
          batch.push_back(pool[static_cast<std::size_t>(rng.uniform_int(pool.size()))]);
        }
      }
    }
    return batch;
  }

 private:
  const Dataset* dataset_;
  BatchSpec spec_;
  std::vector<std::vector<int>> by_identity_;
};

}  // namespace vmrfa
