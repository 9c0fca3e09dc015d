#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "weakseg/io.hpp"
#include "weakseg/rng.hpp"
#include "weakseg/sampler.hpp"
#include "weakseg/tensor.hpp"

namespace weakseg {

struct SyntheticSlide {
  int id = 0;
  SlideLabel label = SlideLabel::Benign;
  Volume<float> pixels;            // channel-planar, values in [0,1]
  Image<std::uint8_t> truth_mask;  // 1 = malign pixel
  std::uint64_t seed = 0;

  std::size_t lesion_pixels() const {
    return static_cast<std::size_t>(std::count(truth_mask.v.begin(), truth_mask.v.end(), 1));
  }
};

struct DatasetSpec {
  int slide_count = 20;
  double benign_fraction = 0.5;  // r
  int height = 128;
  int width = 128;
  int channels = 2;
  double lesion_fraction_min = 0.01;
  double lesion_fraction_max = 0.03;
  int blob_count_min = 1;
  int blob_count_max = 3;
  double noise_scale = 6.0;       // correlation length of the background value noise, px
  double noise_amplitude = 0.5;   // pixel = 0.5 + amplitude * (noise - 0.5) + contrast * lesion
  double lesion_contrast = 0.3;   // mean shift on channel 0 inside lesions
  std::uint64_t seed = 1;

  void validate() const {
    if (slide_count < 1) throw std::invalid_argument("DatasetSpec: slide_count must be >= 1");
    if (!(benign_fraction > 0.0 && benign_fraction < 1.0))
      throw std::invalid_argument("DatasetSpec: benign_fraction must be in (0,1)");
    if (height < 4 || width < 4) throw std::invalid_argument("DatasetSpec: slide too small");
    if (channels < 1) throw std::invalid_argument("DatasetSpec: channels must be >= 1");
    if (!(lesion_fraction_min > 0.0 && lesion_fraction_max < 1.0 &&
          lesion_fraction_min <= lesion_fraction_max))
      throw std::invalid_argument("DatasetSpec: lesion fractions must satisfy 0 < min <= max < 1");
    if (blob_count_min < 1 || blob_count_max < blob_count_min)
      throw std::invalid_argument("DatasetSpec: bad blob count range");
    if (!(noise_scale >= 1.0)) throw std::invalid_argument("DatasetSpec: noise_scale must be >= 1");
    if (!(lesion_contrast > 0.0)) throw std::invalid_argument("DatasetSpec: lesion_contrast must be > 0");
  }
};

namespace detail {

// Smooth value noise in [0,1]: random lattice at `scale` spacing, bilinear
// interpolation in between.
inline Image<float> value_noise(int h, int w, double scale, Rng& rng) {
  const int gh = static_cast<int>(std::ceil(h / scale)) + 2;
  const int gw = static_cast<int>(std::ceil(w / scale)) + 2;
  std::vector<double> grid(static_cast<std::size_t>(gh) * gw);
  for (auto& g : grid) g = rng.uniform();
  Image<float> out(h, w);
  for (int i = 0; i < h; ++i) {
    const double y = i / scale;
    const int y0 = static_cast<int>(y);
    const double fy = y - y0;
    for (int j = 0; j < w; ++j) {
      const double x = j / scale;
      const int x0 = static_cast<int>(x);
      const double fx = x - x0;
      const double a = grid[static_cast<std::size_t>(y0) * gw + x0];
      const double b = grid[static_cast<std::size_t>(y0) * gw + x0 + 1];
      const double c = grid[static_cast<std::size_t>(y0 + 1) * gw + x0];
      const double d = grid[static_cast<std::size_t>(y0 + 1) * gw + x0 + 1];
      out.at(i, j) = static_cast<float>((a * (1 - fx) + b * fx) * (1 - fy) +
                                        (c * (1 - fx) + d * fx) * fy);
    }
  }
  return out;
}

// Marks exactly `target` unmasked pixels closest to an elliptical metric
// centered at (ci, cj). Exact pixel counts by construction, so lesion area
// needs no rasterization slack.
inline void paint_blob(Image<std::uint8_t>& mask, int ci, int cj, double area, double aspect,
                       double angle, std::size_t target) {
  if (target == 0) return;
  const double a = std::sqrt(area * aspect / M_PI);
  const double b = std::sqrt(area / (aspect * M_PI));
  const double ca = std::cos(angle), sa = std::sin(angle);
  struct Cand {
    double d;
    std::int64_t flat;
  };
  std::vector<Cand> cands;
  cands.reserve(mask.size());
  for (int i = 0; i < mask.height; ++i) {
    for (int j = 0; j < mask.width; ++j) {
      if (mask.at(i, j)) continue;
      const double dy = i - ci, dx = j - cj;
      const double u = (dx * ca + dy * sa) / a;
      const double v = (-dx * sa + dy * ca) / b;
      cands.push_back({u * u + v * v, static_cast<std::int64_t>(i) * mask.width + j});
    }
  }
  if (cands.size() < target) throw std::invalid_argument("lesion area exceeds free slide area");
  std::nth_element(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(target) - 1, cands.end(),
                   [](const Cand& x, const Cand& y) {
                     if (x.d != y.d) return x.d < y.d;
                     return x.flat < y.flat;
                   });
  for (std::size_t t = 0; t < target; ++t) mask.v[static_cast<std::size_t>(cands[t].flat)] = 1;
}

}  // namespace detail

// One slide, fully determined by its sub-seed.
inline SyntheticSlide generate_slide(const DatasetSpec& spec, int id, SlideLabel label,
                                     std::uint64_t slide_seed) {
  Rng rng(slide_seed);
  SyntheticSlide s;
  s.id = id;
  s.label = label;
  s.seed = slide_seed;
  s.truth_mask = Image<std::uint8_t>(spec.height, spec.width, 0);

  if (label == SlideLabel::Malign) {
    const double fraction = rng.uniform(spec.lesion_fraction_min, spec.lesion_fraction_max);
    const auto total = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::lround(fraction * static_cast<double>(spec.height) * spec.width)));
    const int blobs = static_cast<int>(rng.uniform_int(spec.blob_count_min, spec.blob_count_max));
    // split the total area over blobs, largest-remainder rounding
    std::vector<double> parts(static_cast<std::size_t>(blobs));
    double part_sum = 0.0;
    for (auto& p : parts) {
      p = rng.uniform(0.5, 1.5);
      part_sum += p;
    }
    std::vector<std::size_t> targets(parts.size());
    std::size_t assigned = 0;
    for (std::size_t b = 0; b < parts.size(); ++b) {
      targets[b] = static_cast<std::size_t>(std::floor(parts[b] / part_sum * static_cast<double>(total)));
      assigned += targets[b];
    }
    for (std::size_t b = 0; assigned < total; b = (b + 1) % targets.size()) {
      ++targets[b];
      ++assigned;
    }
    for (std::size_t b = 0; b < targets.size(); ++b) {
      if (targets[b] == 0) continue;
      const double margin = std::min(std::sqrt(static_cast<double>(targets[b])), spec.height / 2.0 - 1);
      const int ci = std::clamp(static_cast<int>(rng.uniform(margin, spec.height - margin)), 0,
                                spec.height - 1);
      const int cj = std::clamp(static_cast<int>(rng.uniform(margin, spec.width - margin)), 0,
                                spec.width - 1);
      const double aspect = rng.uniform(0.5, 2.0);
      const double angle = rng.uniform(0.0, M_PI);
      detail::paint_blob(s.truth_mask, ci, cj, static_cast<double>(targets[b]), aspect, angle,
                         targets[b]);
    }
  }

  s.pixels = Volume<float>(spec.channels, spec.height, spec.width);
  for (int c = 0; c < spec.channels; ++c) {
    const auto noise = detail::value_noise(spec.height, spec.width, spec.noise_scale, rng);
    float* plane = s.pixels.plane(c);
    for (std::size_t i = 0; i < noise.size(); ++i) {
      double val = 0.5 + spec.noise_amplitude * (static_cast<double>(noise.v[i]) - 0.5);
      if (c == 0 && s.truth_mask.v[i]) val += spec.lesion_contrast;
      plane[i] = static_cast<float>(std::clamp(val, 0.0, 1.0));
    }
  }
  return s;
}

// Count-based label assignment: the first round(r * count) ids are benign.
// Each slide is generated from a sub-seed split off the master seed, so the
// set is reproducible and slides are independent.
inline std::vector<SyntheticSlide> generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  const int n_benign = static_cast<int>(std::lround(spec.benign_fraction * spec.slide_count));
  if (n_benign == 0 || n_benign == spec.slide_count)
    throw std::invalid_argument("generate_dataset: spec leaves one class empty");
  std::vector<SyntheticSlide> slides;
  slides.reserve(static_cast<std::size_t>(spec.slide_count));
  for (int id = 0; id < spec.slide_count; ++id) {
    const auto label = id < n_benign ? SlideLabel::Benign : SlideLabel::Malign;
    slides.push_back(generate_slide(spec, id, label, derive_seed(spec.seed, static_cast<std::uint64_t>(id))));
  }
  return slides;
}

// ---- Patch extraction ----

struct Patch {
  Volume<float> pixels;
  SlideLabel inherited_label = SlideLabel::Benign;
  Image<std::uint8_t> truth_window;  // evaluation/diagnostics only, never an input to training
  int slide_id = -1;
  PixelCoord center;
};

// Window top-left for a patch centered at `center`, shifted inward so the
// window lies fully inside the slide.
inline PixelCoord clamp_window_origin(PixelCoord center, int size, int height, int width) {
  if (size < 1 || size > height || size > width)
    throw std::invalid_argument("patch size does not fit the slide");
  const int top = std::clamp(center.i - size / 2, 0, height - size);
  const int left = std::clamp(center.j - size / 2, 0, width - size);
  return {top, left};
}

inline Patch extract_patch(const SyntheticSlide& slide, PixelCoord center, int size) {
  const auto origin = clamp_window_origin(center, size, slide.pixels.height, slide.pixels.width);
  Patch p;
  p.inherited_label = slide.label;
  p.slide_id = slide.id;
  p.center = center;
  p.pixels = Volume<float>(slide.pixels.channels, size, size);
  p.truth_window = Image<std::uint8_t>(size, size);
  for (int c = 0; c < slide.pixels.channels; ++c)
    for (int i = 0; i < size; ++i)
      for (int j = 0; j < size; ++j)
        p.pixels.at(c, i, j) = slide.pixels.at(c, origin.i + i, origin.j + j);
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j)
      p.truth_window.at(i, j) = slide.truth_mask.at(origin.i + i, origin.j + j);
  return p;
}

// ---- Label-noise measurement ----

struct GammaEstimate {
  double gamma = 0.0;
  double std_error = 0.0;
  long draws = 0;
};

// Monte-Carlo estimate of the probability that a patch drawn from `dist`
// contains no malign pixel.
inline GammaEstimate empirical_gamma(const SyntheticSlide& slide, int patch_size,
                                     const PatchDistribution& dist, long n, std::uint64_t seed) {
  if (slide.label != SlideLabel::Malign)
    throw std::invalid_argument("empirical_gamma: slide must be malign");
  if (n < 1) throw std::invalid_argument("empirical_gamma: n must be >= 1");
  Rng rng(seed);
  const auto centers = sample_patch_centers(dist, n, rng);
  long clean = 0;
  for (const auto& c : centers) {
    const auto origin = clamp_window_origin(c, patch_size, slide.truth_mask.height, slide.truth_mask.width);
    bool any = false;
    for (int i = origin.i; i < origin.i + patch_size && !any; ++i)
      for (int j = origin.j; j < origin.j + patch_size; ++j)
        if (slide.truth_mask.at(i, j)) {
          any = true;
          break;
        }
    if (!any) ++clean;
  }
  GammaEstimate e;
  e.draws = n;
  e.gamma = static_cast<double>(clean) / static_cast<double>(n);
  e.std_error = std::sqrt(std::max(e.gamma * (1.0 - e.gamma), 1e-12) / static_cast<double>(n));
  return e;
}

// Exact gamma under the uniform center distribution: fraction of centers
// whose clamped window misses every lesion pixel. Prefix sums make the
// window test O(1) per center.
inline double exact_uniform_gamma(const SyntheticSlide& slide, int patch_size) {
  const int h = slide.truth_mask.height, w = slide.truth_mask.width;
  std::vector<long> prefix(static_cast<std::size_t>(h + 1) * (w + 1), 0);
  auto pre = [&](int i, int j) -> long& { return prefix[static_cast<std::size_t>(i) * (w + 1) + j]; };
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      pre(i + 1, j + 1) = pre(i, j + 1) + pre(i + 1, j) - pre(i, j) + (slide.truth_mask.at(i, j) ? 1 : 0);
  long clean = 0;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const auto o = clamp_window_origin({i, j}, patch_size, h, w);
      const long hits = pre(o.i + patch_size, o.j + patch_size) - pre(o.i, o.j + patch_size) -
                        pre(o.i + patch_size, o.j) + pre(o.i, o.j);
      if (hits == 0) ++clean;
    }
  }
  return static_cast<double>(clean) / static_cast<double>(h) / static_cast<double>(w);
}

// ---- Dihedral augmentation ----

// Source coordinate for dihedral transform t (0..7) applied to a square of
// side s: two bits of rotation, one of mirroring.
inline PixelCoord dihedral_source(int t, int i, int j, int s) {
  if (t & 4) j = s - 1 - j;  // horizontal mirror
  switch (t & 3) {
    case 0: return {i, j};
    case 1: return {s - 1 - j, i};          // 90 deg
    case 2: return {s - 1 - i, s - 1 - j};  // 180 deg
    default: return {j, s - 1 - i};         // 270 deg
  }
}

inline Patch apply_dihedral(const Patch& p, int t) {
  const int s = p.pixels.height;
  if (p.pixels.width != s) throw std::invalid_argument("apply_dihedral: patch must be square");
  Patch out = p;
  for (int c = 0; c < p.pixels.channels; ++c)
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j) {
        const auto src = dihedral_source(t, i, j, s);
        out.pixels.at(c, i, j) = p.pixels.at(c, src.i, src.j);
      }
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      const auto src = dihedral_source(t, i, j, s);
      out.truth_window.at(i, j) = p.truth_window.at(src.i, src.j);
    }
  return out;
}

inline Patch augment(const Patch& p, Rng& rng) {
  return apply_dihedral(p, static_cast<int>(rng.uniform_index(8)));
}

// ---- Dataset persistence ----
// Directory layout: index.json + one raw float32 tensor per slide + masks as PGM.

inline void save_dataset(const std::filesystem::path& dir, const DatasetSpec& spec,
                         const std::vector<SyntheticSlide>& slides) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json index;
  index["spec"] = {{"slide_count", spec.slide_count},
                   {"benign_fraction", spec.benign_fraction},
                   {"height", spec.height},
                   {"width", spec.width},
                   {"channels", spec.channels},
                   {"lesion_fraction_min", spec.lesion_fraction_min},
                   {"lesion_fraction_max", spec.lesion_fraction_max},
                   {"blob_count_min", spec.blob_count_min},
                   {"blob_count_max", spec.blob_count_max},
                   {"noise_scale", spec.noise_scale},
                   {"noise_amplitude", spec.noise_amplitude},
                   {"lesion_contrast", spec.lesion_contrast},
                   {"seed", spec.seed}};
  index["slides"] = nlohmann::json::array();
  char name[64];
  for (const auto& s : slides) {
    std::snprintf(name, sizeof name, "slide_%04d.f32", s.id);
    const std::string pixels_file = name;
    std::snprintf(name, sizeof name, "mask_%04d.pgm", s.id);
    const std::string mask_file = name;
    write_f32(dir / pixels_file, s.pixels.v.data(), s.pixels.size());
    Image<std::uint8_t> mask_img(s.truth_mask.height, s.truth_mask.width);
    for (std::size_t i = 0; i < mask_img.size(); ++i) mask_img.v[i] = s.truth_mask.v[i] ? 255 : 0;
    write_pgm(dir / mask_file, mask_img);
    index["slides"].push_back({{"id", s.id},
                               {"label", s.label == SlideLabel::Malign ? "malign" : "benign"},
                               {"seed", s.seed},
                               {"pixels", pixels_file},
                               {"mask", mask_file},
                               {"lesion_pixels", s.lesion_pixels()}});
  }
  std::ofstream f(dir / "index.json");
  if (!f) throw std::runtime_error("cannot write index.json in " + dir.string());
  f << index.dump(2) << "\n";
}

struct Dataset {
  DatasetSpec spec;
  std::vector<SyntheticSlide> slides;

  const SyntheticSlide& by_id(int id) const {
    for (const auto& s : slides)
      if (s.id == id) return s;
    throw std::invalid_argument("unknown slide id " + std::to_string(id));
  }
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "index.json");
  if (!f) throw std::runtime_error("cannot open " + (dir / "index.json").string());
  nlohmann::json index = nlohmann::json::parse(f);
  Dataset ds;
  const auto& js = index.at("spec");
  ds.spec.slide_count = js.at("slide_count").get<int>();
  ds.spec.benign_fraction = js.at("benign_fraction").get<double>();
  ds.spec.height = js.at("height").get<int>();
  ds.spec.width = js.at("width").get<int>();
  ds.spec.channels = js.at("channels").get<int>();
  ds.spec.lesion_fraction_min = js.at("lesion_fraction_min").get<double>();
  ds.spec.lesion_fraction_max = js.at("lesion_fraction_max").get<double>();
  ds.spec.blob_count_min = js.at("blob_count_min").get<int>();
  ds.spec.blob_count_max = js.at("blob_count_max").get<int>();
  ds.spec.noise_scale = js.at("noise_scale").get<double>();
  ds.spec.noise_amplitude = js.at("noise_amplitude").get<double>();
  ds.spec.lesion_contrast = js.at("lesion_contrast").get<double>();
  ds.spec.seed = js.at("seed").get<std::uint64_t>();
  for (const auto& sj : index.at("slides")) {
    SyntheticSlide s;
    s.id = sj.at("id").get<int>();
    s.label = sj.at("label").get<std::string>() == "malign" ? SlideLabel::Malign : SlideLabel::Benign;
    s.seed = sj.at("seed").get<std::uint64_t>();
    s.pixels = Volume<float>(ds.spec.channels, ds.spec.height, ds.spec.width);
    s.pixels.v = read_f32(dir / sj.at("pixels").get<std::string>(), s.pixels.size());
    const auto mask_img = read_pgm(dir / sj.at("mask").get<std::string>());
    s.truth_mask = Image<std::uint8_t>(mask_img.height, mask_img.width);
    for (std::size_t i = 0; i < mask_img.size(); ++i) s.truth_mask.v[i] = mask_img.v[i] ? 1 : 0;
    ds.slides.push_back(std::move(s));
  }
  return ds;
}

}  // namespace weakseg
