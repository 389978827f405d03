#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "metadrn/pnm.hpp"
#include "metadrn/rng.hpp"
#include "metadrn/tensor.hpp"

namespace metadrn {

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

// One labeled image: RGB in [0,1] plus a strictly binary mask.
template <typename T>
struct SegSample {
  Tensor<T> image;  // [3,H,W]
  Tensor<T> mask;   // [H,W], values in {0,1}
  int class_id = -1;
  int sample_id = -1;
};

template <typename T>
struct Episode {
  int class_id = -1;
  std::vector<SegSample<T>> support;
  std::vector<SegSample<T>> query;
};

struct ClassSplit {
  std::vector<int> train, val, test;
};

// Indexed episodic dataset. Samples live either on disk (paths into the
// root/<class>/<k>.ppm layout) or in memory as 8-bit buffers (synthetic data).
class Dataset {
 public:
  struct DiskSample {
    std::string image_path;
    std::string mask_path;
  };
  struct RawSample {
    int64_t width = 0, height = 0;
    std::vector<uint8_t> rgb;   // 3*H*W interleaved
    std::vector<uint8_t> mask;  // H*W
  };
  using Source = std::variant<DiskSample, RawSample>;

  struct ClassEntry {
    std::string name;
    Split split = Split::train;
    std::vector<Source> samples;
  };

  std::vector<ClassEntry> classes;

  size_t num_classes() const { return classes.size(); }

  size_t num_samples() const {
    size_t n = 0;
    for (const auto& c : classes) n += c.samples.size();
    return n;
  }

  std::vector<int> classes_of(Split split) const {
    std::vector<int> out;
    for (size_t i = 0; i < classes.size(); ++i)
      if (classes[i].split == split) out.push_back(static_cast<int>(i));
    return out;
  }

  ClassSplit split_sets() const {
    return {classes_of(Split::train), classes_of(Split::val), classes_of(Split::test)};
  }

  int find_class(const std::string& name) const {
    for (size_t i = 0; i < classes.size(); ++i)
      if (classes[i].name == name) return static_cast<int>(i);
    return -1;
  }

  // Assign splits by index order: first n_train train, then n_val, then n_test.
  void assign_splits(size_t n_train, size_t n_val, size_t n_test) {
    check_arg(n_train + n_val + n_test == classes.size(),
              "Dataset::assign_splits: counts must cover all classes");
    for (size_t i = 0; i < classes.size(); ++i)
      classes[i].split = i < n_train            ? Split::train
                         : i < n_train + n_val  ? Split::val
                                                : Split::test;
  }

  template <typename T>
  SegSample<T> sample(int class_idx, int sample_idx) const {
    const auto& entry = classes.at(static_cast<size_t>(class_idx));
    const Source& src = entry.samples.at(static_cast<size_t>(sample_idx));
    SegSample<T> out;
    out.class_id = class_idx;
    out.sample_id = sample_idx;
    if (const auto* disk = std::get_if<DiskSample>(&src)) {
      PnmImage img = read_pnm(disk->image_path);
      if (img.channels != 3) fail("dataset: '" + disk->image_path + "' is not a P6 color image");
      PnmImage msk = read_pnm(disk->mask_path);
      if (msk.channels != 1) fail("dataset: '" + disk->mask_path + "' is not a P5 gray mask");
      if (msk.width != img.width || msk.height != img.height)
        fail("dataset: mask dims do not match image for '" + disk->image_path + "'");
      out.image = decode_image<T>(img.width, img.height, img.pixels);
      out.mask = decode_mask<T>(msk.width, msk.height, msk.pixels);
    } else {
      const auto& raw = std::get<RawSample>(src);
      out.image = decode_image<T>(raw.width, raw.height, raw.rgb);
      out.mask = decode_mask<T>(raw.width, raw.height, raw.mask);
    }
    return out;
  }

 private:
  // interleaved u8 RGB -> planar [3,H,W] in [0,1]
  template <typename T>
  static Tensor<T> decode_image(int64_t w, int64_t h, const std::vector<uint8_t>& rgb) {
    Tensor<T> img = Tensor<T>::uninit({3, h, w});
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int64_t c = 0; c < 3; ++c)
          img.raw()[(c * h + y) * w + x] = static_cast<T>(rgb[(y * w + x) * 3 + c] / 255.0);
    return img;
  }

  // 8-bit mask binarized at 128
  template <typename T>
  static Tensor<T> decode_mask(int64_t w, int64_t h, const std::vector<uint8_t>& gray) {
    Tensor<T> mask = Tensor<T>::uninit({h, w});
    for (int64_t i = 0; i < h * w; ++i) mask.raw()[i] = gray[i] >= 128 ? T(1) : T(0);
    return mask;
  }
};

// Quantizes a sample to the on-disk formats: image as P6 (round(v*255)),
// mask as P5 with foreground 255.
template <typename T>
void write_sample_files(const SegSample<T>& s, const std::string& image_path,
                        const std::string& mask_path) {
  const int64_t h = s.mask.dim(0), w = s.mask.dim(1);
  PnmImage img{w, h, 3, std::vector<uint8_t>(static_cast<size_t>(3 * h * w))};
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(s.image.data()[(c * h + y) * w + x]), 0.0, 1.0);
        img.pixels[static_cast<size_t>((y * w + x) * 3 + c)] =
            static_cast<uint8_t>(std::lround(v * 255.0));
      }
  write_pnm(image_path, img);
  PnmImage msk{w, h, 1, std::vector<uint8_t>(static_cast<size_t>(h * w))};
  for (int64_t i = 0; i < h * w; ++i)
    msk.pixels[static_cast<size_t>(i)] = s.mask.data()[i] >= T(0.5) ? 255 : 0;
  write_pnm(mask_path, msk);
}

// ---- disk loading ------------------------------------------------------------------

// Loads a root/<class>/{k.ppm, k_mask.pgm} tree. The optional manifest pins
// splits with one "<class_name> <train|val|test>" line per class; without it
// splits fall out of lexicographic order with round(24%) test and round(6%)
// val counts (700/60/240 for a 1000-class tree).
inline Dataset load_dataset(const std::string& root, const std::string& manifest_path = "") {
  namespace fs = std::filesystem;
  check_arg(fs::is_directory(root), "load_dataset: '" + root + "' is not a directory");

  Dataset ds;
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());

  for (const auto& name : names) {
    Dataset::ClassEntry entry;
    entry.name = name;
    std::vector<std::pair<long, fs::path>> images;
    for (const auto& f : fs::directory_iterator(fs::path(root) / name)) {
      const std::string fname = f.path().filename().string();
      if (fname.size() > 4 && fname.ends_with(".ppm")) {
        images.emplace_back(std::strtol(fname.c_str(), nullptr, 10), f.path());
      }
    }
    std::sort(images.begin(), images.end());
    for (const auto& [k, path] : images) {
      fs::path mask = path;
      mask.replace_filename(path.stem().string() + "_mask.pgm");
      if (!fs::exists(mask))
        fail("load_dataset: missing mask file '" + mask.string() + "' for image '" +
             path.string() + "'");
      entry.samples.push_back(Dataset::DiskSample{path.string(), mask.string()});
    }
    if (entry.samples.size() != 10)
      std::cerr << "load_dataset: class '" << name << "' has " << entry.samples.size()
                << " samples (expected 10)\n";
    ds.classes.push_back(std::move(entry));
  }

  if (!manifest_path.empty()) {
    std::ifstream mf(manifest_path);
    if (!mf) fail("load_dataset: cannot open manifest '" + manifest_path + "'");
    std::string cls, split;
    size_t assigned = 0;
    while (mf >> cls >> split) {
      const int idx = ds.find_class(cls);
      if (idx < 0) fail("load_dataset: manifest names unknown class '" + cls + "'");
      if (split == "train")
        ds.classes[static_cast<size_t>(idx)].split = Split::train;
      else if (split == "val")
        ds.classes[static_cast<size_t>(idx)].split = Split::val;
      else if (split == "test")
        ds.classes[static_cast<size_t>(idx)].split = Split::test;
      else
        fail("load_dataset: manifest has bad split '" + split + "' for class '" + cls + "'");
      ++assigned;
    }
    if (assigned != ds.num_classes())
      fail("load_dataset: manifest covers " + std::to_string(assigned) + " of " +
           std::to_string(ds.num_classes()) + " classes");
  } else {
    const size_t n = ds.num_classes();
    const size_t n_test = static_cast<size_t>(std::lround(0.24 * static_cast<double>(n)));
    const size_t n_val = static_cast<size_t>(std::lround(0.06 * static_cast<double>(n)));
    check_arg(n_test + n_val <= n, "load_dataset: too few classes to split");
    ds.assign_splits(n - n_val - n_test, n_val, n_test);
  }
  return ds;
}

// ---- synthetic generator -----------------------------------------------------------

namespace detail {

enum class ShapeKind { disk, square, triangle, ring, cross, bar };
enum class FillKind { solid, hstripes, vstripes, checker, dots, diag };

inline bool inside_shape(ShapeKind kind, double dx, double dy, double r) {
  switch (kind) {
    case ShapeKind::disk:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::square:
      return std::max(std::abs(dx), std::abs(dy)) <= 0.85 * r;
    case ShapeKind::triangle: {
      // apex up: base at dy = 0.8r, sides converge at dy = -r
      if (dy < -r || dy > 0.8 * r) return false;
      const double half_width = (dy + r) / 1.8 * 1.05;
      return std::abs(dx) <= half_width;
    }
    case ShapeKind::ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);
    }
    case ShapeKind::cross:
      return (std::abs(dx) <= 0.35 * r && std::abs(dy) <= r) ||
             (std::abs(dy) <= 0.35 * r && std::abs(dx) <= r);
    case ShapeKind::bar:
      return std::abs(dx) <= r && std::abs(dy) <= 0.3 * r;
  }
  return false;
}

inline bool fill_pattern(FillKind kind, int64_t x, int64_t y) {
  switch (kind) {
    case FillKind::solid: return true;
    case FillKind::hstripes: return (y / 2) % 2 == 0;
    case FillKind::vstripes: return (x / 2) % 2 == 0;
    case FillKind::checker: return ((x / 2) + (y / 2)) % 2 == 0;
    case FillKind::dots: return (x % 3 == 1) && (y % 3 == 1);
    case FillKind::diag: return ((x + y) / 2) % 2 == 0;
  }
  return true;
}

}  // namespace detail

// Classes are (shape kind x fill pattern) combos rendered at random
// position/scale on structured noise backgrounds; masks are the exact
// rendered region. Foreground fraction is kept in [0.05, 0.6] by rejection.
// Deterministic per seed.
inline Dataset synth_generate(int num_classes, int samples_per_class, int64_t size,
                              uint64_t seed) {
  check_arg(size % 4 == 0, "synth_generate: size must be divisible by 4");
  check_arg(num_classes >= 1 && samples_per_class >= 1, "synth_generate: empty dataset");
  Dataset ds;
  Rng root(seed);
  for (int c = 0; c < num_classes; ++c) {
    Dataset::ClassEntry entry;
    entry.name = "synth_" + std::string(c < 10 ? "00" : c < 100 ? "0" : "") + std::to_string(c);
    const auto shape = static_cast<detail::ShapeKind>(c % 6);
    const auto fill = static_cast<detail::FillKind>((c / 6) % 6);
    Rng class_rng = root.fork(static_cast<uint64_t>(c) + 1);
    // class-fixed bright foreground palette; variant salt recolors wrapped ids
    const double hue_a = class_rng.uniform(0.6, 1.0);
    const double hue_b = class_rng.uniform(0.55, 0.95);
    for (int s = 0; s < samples_per_class; ++s) {
      Rng rng = class_rng.fork(static_cast<uint64_t>(s) + 1);
      Dataset::RawSample raw;
      raw.width = size;
      raw.height = size;
      raw.rgb.resize(static_cast<size_t>(3 * size * size));
      raw.mask.assign(static_cast<size_t>(size * size), 0);

      // muted structured background: corner-anchored gradient plus speckle
      double base[3], gx[3], gy[3];
      for (int ch = 0; ch < 3; ++ch) {
        base[ch] = rng.uniform(0.15, 0.4);
        gx[ch] = rng.uniform(-0.12, 0.12);
        gy[ch] = rng.uniform(-0.12, 0.12);
      }
      for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x)
          for (int64_t ch = 0; ch < 3; ++ch) {
            const double fx = static_cast<double>(x) / size;
            const double fy = static_cast<double>(y) / size;
            double v = base[ch] + gx[ch] * fx + gy[ch] * fy + rng.uniform(-0.06, 0.06);
            raw.rgb[static_cast<size_t>((y * size + x) * 3 + ch)] =
                static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
          }

      // geometry with foreground-fraction rejection
      for (int attempt = 0; attempt < 100; ++attempt) {
        const double cx = rng.uniform(0.3, 0.7) * size;
        const double cy = rng.uniform(0.3, 0.7) * size;
        const double r = rng.uniform(0.18, 0.34) * size;
        std::vector<uint8_t> mask(static_cast<size_t>(size * size), 0);
        int64_t fg = 0;
        for (int64_t y = 0; y < size; ++y)
          for (int64_t x = 0; x < size; ++x)
            if (detail::inside_shape(shape, x + 0.5 - cx, y + 0.5 - cy, r)) {
              mask[static_cast<size_t>(y * size + x)] = 255;
              ++fg;
            }
        const double frac = static_cast<double>(fg) / static_cast<double>(size * size);
        if (frac < 0.05 || frac > 0.6) continue;
        raw.mask = std::move(mask);
        break;
      }
      if (raw.mask.empty() || std::count(raw.mask.begin(), raw.mask.end(), 255) == 0)
        fail("synth_generate: rejection sampling failed for class " + entry.name);

      // paint the shape with the class fill pattern in the bright palette
      const double tint = rng.uniform(0.85, 1.0);
      for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
          if (!raw.mask[static_cast<size_t>(y * size + x)]) continue;
          const bool on = detail::fill_pattern(fill, x, y);
          const double rgb[3] = {on ? hue_a * tint : hue_b * 0.7,
                                 on ? hue_b * tint : hue_a * 0.7,
                                 on ? 0.9 * tint : 0.45};
          for (int64_t ch = 0; ch < 3; ++ch)
            raw.rgb[static_cast<size_t>((y * size + x) * 3 + ch)] =
                static_cast<uint8_t>(std::lround(std::clamp(rgb[ch], 0.0, 1.0) * 255.0));
        }

      entry.samples.push_back(std::move(raw));
    }
    ds.classes.push_back(std::move(entry));
  }
  const size_t n = ds.num_classes();
  const size_t n_test = static_cast<size_t>(std::lround(0.24 * static_cast<double>(n)));
  const size_t n_val = static_cast<size_t>(std::lround(0.06 * static_cast<double>(n)));
  ds.assign_splits(n - n_val - n_test, n_val, n_test);
  return ds;
}

// ---- episode sampling -----------------------------------------------------------------

// Support/query draw for one class: shots + q distinct samples, query clamped
// to whatever remains.
template <typename T>
Episode<T> episode_for_class(const Dataset& ds, int class_idx, Rng& rng, int shots = 1,
                             int q = 5) {
  const auto& entry = ds.classes.at(static_cast<size_t>(class_idx));
  const int n = static_cast<int>(entry.samples.size());
  check_arg(n >= shots + 1, "episode_for_class: class '" + entry.name + "' has " +
                                std::to_string(n) + " samples, needs at least " +
                                std::to_string(shots + 1));
  const int q_eff = std::min(q, n - shots);
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  rng.shuffle(order);
  Episode<T> ep;
  ep.class_id = class_idx;
  for (int i = 0; i < shots; ++i) ep.support.push_back(ds.sample<T>(class_idx, order[i]));
  for (int i = 0; i < q_eff; ++i)
    ep.query.push_back(ds.sample<T>(class_idx, order[shots + i]));
  return ep;
}

template <typename T>
Episode<T> sample_episode(const Dataset& ds, Split split, Rng& rng, int shots = 1, int q = 5) {
  const auto classes = ds.classes_of(split);
  check_arg(!classes.empty(), std::string("sample_episode: split '") + split_name(split) +
                                  "' has no classes");
  const int cls = classes[rng.uniform_int(classes.size())];
  return episode_for_class<T>(ds, cls, rng, shots, q);
}

// ---- augmentation -----------------------------------------------------------------------

struct AugmentPolicy {
  double p_flip = 0.5, p_rotate = 0.5, p_zoom = 0.5, p_warp = 0.5, p_lighting = 0.5;
  double max_rotate_deg = 30.0;
  double zoom_lo = 0.8, zoom_hi = 1.2;
  double max_shear_deg = 10.0;
  double max_jitter = 0.2;

  static AugmentPolicy identity() {
    AugmentPolicy p;
    p.p_flip = p.p_rotate = p.p_zoom = p.p_warp = p.p_lighting = 0.0;
    return p;
  }
};

// Flip / rotate / zoom / shear (one composed center-anchored affine, bilinear
// for image, nearest for mask) and lighting jitter on the image only. Each
// transform fires with its own probability. Masks stay strictly binary and
// images stay in [0,1].
template <typename T>
SegSample<T> augment(const SegSample<T>& sample, Rng& rng, const AugmentPolicy& policy) {
  const int64_t h = sample.mask.dim(0), w = sample.mask.dim(1);
  SegSample<T> out;
  out.class_id = sample.class_id;
  out.sample_id = sample.sample_id;

  const bool flip = rng.bernoulli(policy.p_flip);
  double angle = 0.0, zoom = 1.0, shear = 0.0;
  bool affine = false;
  if (rng.bernoulli(policy.p_rotate)) {
    angle = rng.uniform(-policy.max_rotate_deg, policy.max_rotate_deg) * std::numbers::pi / 180.0;
    affine = true;
  }
  if (rng.bernoulli(policy.p_zoom)) {
    zoom = rng.uniform(policy.zoom_lo, policy.zoom_hi);
    affine = true;
  }
  if (rng.bernoulli(policy.p_warp)) {
    shear = std::tan(rng.uniform(-policy.max_shear_deg, policy.max_shear_deg) *
                     std::numbers::pi / 180.0);
    affine = true;
  }

  Tensor<T> image = Tensor<T>::uninit({3, h, w});
  Tensor<T> mask = Tensor<T>::uninit({h, w});
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  // inverse map: rotation^-1 * shear^-1 * scale^-1, applied about the center
  const double ca = std::cos(-angle), sa = std::sin(-angle);
  auto src_of = [&](double x, double y, double& sx, double& sy) {
    double dx = x - cx, dy = y - cy;
    if (flip) dx = -dx;
    if (affine) {
      const double rx = ca * dx - sa * dy;
      const double ry = sa * dx + ca * dy;
      const double hx = rx - shear * ry;  // inverse of x' = x + shear*y
      const double hy = ry;
      dx = hx / zoom;
      dy = hy / zoom;
    }
    sx = dx + cx;
    sy = dy + cy;
  };

  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double sx, sy;
      src_of(static_cast<double>(x), static_cast<double>(y), sx, sy);
      // nearest for the mask, outside maps to background
      const int64_t nx = static_cast<int64_t>(std::lround(sx));
      const int64_t ny = static_cast<int64_t>(std::lround(sy));
      mask.raw()[y * w + x] = (nx >= 0 && nx < w && ny >= 0 && ny < h)
                                  ? sample.mask.data()[ny * w + nx]
                                  : T(0);
      // bilinear for the image, zero padded
      const int64_t x0 = static_cast<int64_t>(std::floor(sx));
      const int64_t y0 = static_cast<int64_t>(std::floor(sy));
      const double fx = sx - static_cast<double>(x0);
      const double fy = sy - static_cast<double>(y0);
      for (int64_t c = 0; c < 3; ++c) {
        auto at = [&](int64_t xx, int64_t yy) -> double {
          if (xx < 0 || xx >= w || yy < 0 || yy >= h) return 0.0;
          return static_cast<double>(sample.image.data()[(c * h + yy) * w + xx]);
        };
        const double v = (1 - fy) * ((1 - fx) * at(x0, y0) + fx * at(x0 + 1, y0)) +
                         fy * ((1 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
        image.raw()[(c * h + y) * w + x] = static_cast<T>(v);
      }
    }

  if (rng.bernoulli(policy.p_lighting)) {
    const double brightness = rng.uniform(-policy.max_jitter, policy.max_jitter);
    const double contrast = rng.uniform(-policy.max_jitter, policy.max_jitter);
    for (auto& v : image.raw()) {
      const double adjusted = (static_cast<double>(v) - 0.5) * (1.0 + contrast) + 0.5 + brightness;
      v = static_cast<T>(adjusted);
    }
  }
  for (auto& v : image.raw()) v = std::clamp(v, T(0), T(1));

  out.image = image;
  out.mask = mask;
  return out;
}

// ---- epoch iteration -----------------------------------------------------------------------

// One pass over a split: classes shuffled, drawn without replacement, chunked
// into ceil(|classes| / meta_batch) batches. Episodes materialize lazily per
// batch. Fold the epoch index into the rng fork for fresh orders per epoch.
template <typename T>
class EpochIter {
 public:
  EpochIter(const Dataset& ds, Split split, int meta_batch, Rng rng, int shots = 1, int q = 5)
      : ds_(&ds), rng_(rng), shots_(shots), q_(q), meta_batch_(meta_batch) {
    check_arg(meta_batch >= 1, "EpochIter: meta_batch must be >= 1");
    order_ = ds.classes_of(split);
    check_arg(!order_.empty(), std::string("EpochIter: split '") + split_name(split) +
                                   "' has no classes");
    rng_.shuffle(order_);
  }

  size_t num_batches() const {
    return (order_.size() + static_cast<size_t>(meta_batch_) - 1) /
           static_cast<size_t>(meta_batch_);
  }

  std::optional<std::vector<Episode<T>>> next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    std::vector<Episode<T>> batch;
    while (cursor_ < order_.size() && batch.size() < static_cast<size_t>(meta_batch_)) {
      batch.push_back(episode_for_class<T>(*ds_, order_[cursor_], rng_, shots_, q_));
      ++cursor_;
    }
    return batch;
  }

 private:
  const Dataset* ds_;
  Rng rng_;
  int shots_, q_, meta_batch_;
  std::vector<int> order_;
  size_t cursor_ = 0;
};

}  // namespace metadrn
