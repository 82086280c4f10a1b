// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include "ffa/imgdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace ffa {

namespace {

struct Segment {
  float x0, y0, x1, y1, r;
};

float dist_to_segment(float px, float py, const Segment& s) {
  const float dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const float len2 = dx * dx + dy * dy;
  float t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.f;
  t = std::clamp(t, 0.f, 1.f);
  const float qx = s.x0 + t * dx - px, qy = s.y0 + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

struct Branch {
  float x, y, angle, radius;
  int depth;
};

std::vector<Segment> grow_tree(Rng& rng, float cx, float cy, float size, double density) {
  std::uniform_real_distribution<float> u(0.f, 1.f);
  std::normal_distribution<float> n(0.f, 1.f);
  const float unit = size / 64.f;
  const int trunks = 3 + static_cast<int>(std::lround(density * 3.0));
  const float min_radius = 0.45f * unit;
  const float branch_p = static_cast<float>(0.2 + 0.35 * density);

  std::vector<Branch> stack;
  const float offset = u(rng) * 2.f * std::numbers::pi_v<float>;
  for (int i = 0; i < trunks; ++i) {
    const float a = offset + 2.f * std::numbers::pi_v<float> * i / trunks + 0.3f * n(rng);
    stack.push_back({cx, cy, a, unit * (1.15f + 0.45f * u(rng)), 0});
  }
  std::vector<Segment> segs;
  while (!stack.empty() && segs.size() < 600) {
    Branch b = stack.back();
    stack.pop_back();
    while (b.radius >= min_radius && b.depth < 40) {
      const float len = size * (0.05f + 0.04f * u(rng));
      b.angle += 0.25f * n(rng);
      const float nx = b.x + len * std::cos(b.angle), ny = b.y + len * std::sin(b.angle);
      segs.push_back({b.x, b.y, nx, ny, b.radius});
      b.x = nx;
      b.y = ny;
      ++b.depth;
      if (nx < -2 * unit || ny < -2 * unit || nx > size + 2 * unit || ny > size + 2 * unit) break;
      if (u(rng) < branch_p) {
        const float side = u(rng) < 0.5f ? -1.f : 1.f;
        stack.push_back({nx, ny, b.angle + side * (0.5f + 0.5f * u(rng)), b.radius * 0.75f, b.depth});
      }
      b.radius *= 0.93f;
    }
  }
  return segs;
}

// Rasterizes the tree; returns the binary mask and, per pixel, the largest covering radius.
std::pair<Mask, std::vector<float>> rasterize(const std::vector<Segment>& segs, int size) {
  Mask mask(size, size);
  std::vector<float> caliber(static_cast<std::size_t>(size) * size, 0.f);
  for (const auto& s : segs) {
    const int x_lo = std::max(0, static_cast<int>(std::floor(std::min(s.x0, s.x1) - s.r - 1)));
    const int x_hi = std::min(size - 1, static_cast<int>(std::ceil(std::max(s.x0, s.x1) + s.r + 1)));
    const int y_lo = std::max(0, static_cast<int>(std::floor(std::min(s.y0, s.y1) - s.r - 1)));
    const int y_hi = std::min(size - 1, static_cast<int>(std::ceil(std::max(s.y0, s.y1) + s.r + 1)));
    for (int y = y_lo; y <= y_hi; ++y)
      for (int x = x_lo; x <= x_hi; ++x)
        if (dist_to_segment(x + 0.5f, y + 0.5f, s) <= s.r) {
          mask.at(y, x) = 1;
          auto& c = caliber[static_cast<std::size_t>(y) * size + x];
          c = std::max(c, s.r);
        }
  }
  return {std::move(mask), std::move(caliber)};
}

std::uint64_t pair_seed(std::uint64_t seed, int label, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(label), static_cast<std::uint32_t>(index), 0x5eedu};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

double mask_iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw Error("mask_iou: shape mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += a.bits[i] && b.bits[i];
    uni += a.bits[i] || b.bits[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

double mask_correlation(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw Error("mask_correlation: shape mismatch");
  const double n = static_cast<double>(a.bits.size());
  double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    const double x = a.bits[i], y = b.bits[i];
    sa += x;
    sb += y;
    sab += x * y;
    saa += x * x;
    sbb += y * y;
  }
  const double cov = sab / n - (sa / n) * (sb / n);
  const double va = saa / n - (sa / n) * (sa / n), vb = sbb / n - (sb / n) * (sb / n);
  if (va <= 0 || vb <= 0) return a == b ? 1.0 : 0.0;
  return cov / std::sqrt(va * vb);
}

int DatasetSpec::label_of(const std::string& name) const {
  for (int i = 0; i < num_classes(); ++i)
    if (class_names[static_cast<std::size_t>(i)] == name) return i;
  throw Error("unknown class label '" + name + "'");
}

void DatasetSpec::validate() const {
  if (class_names.empty() || class_names.size() != n_per_class.size())
    throw ConfigError("dataset: class names and per-class counts must have equal, nonzero length");
  for (int n : n_per_class)
    if (n < 1) throw ConfigError("dataset: every class needs at least one sample");
  if (image_size < 16 || image_size % 2) throw ConfigError("dataset: image_size must be even and >= 16");
  if (!(vessel_density > 0 && vessel_density <= 1)) throw ConfigError("dataset: vessel_density must be in (0, 1]");
  if (!(lesion_intensity >= 0)) throw ConfigError("dataset: lesion_intensity must be >= 0");
}

ImagePair generate_pair(const DatasetSpec& spec, int label, int index) {
  spec.validate();
  if (label < 0 || label >= spec.num_classes()) throw Error("generate_pair: unknown label " + std::to_string(label));
  if (index < 0 || index >= spec.n_per_class[static_cast<std::size_t>(label)])
    throw Error("generate_pair: index " + std::to_string(index) + " out of range for class " +
                spec.class_names[static_cast<std::size_t>(label)]);

  Rng rng(pair_seed(spec.seed, label, index));
  std::uniform_real_distribution<float> u(0.f, 1.f);
  std::normal_distribution<float> n(0.f, 1.f);
  const int s = spec.image_size;
  const float fs = static_cast<float>(s);
  const float unit = fs / 64.f;
  const float li = static_cast<float>(spec.lesion_intensity);

  const float cx = fs * (0.5f + 0.24f * (u(rng) - 0.5f));
  const float cy = fs * (0.5f + 0.2f * (u(rng) - 0.5f));
  const auto segs = grow_tree(rng, cx, cy, fs, spec.vessel_density);
  auto [vessels, caliber] = rasterize(segs, s);
  const float max_cal = unit * 1.6f;

  const float tint[3] = {0.62f + 0.1f * (u(rng) - 0.5f), 0.50f + 0.1f * (u(rng) - 0.5f),
                         0.30f + 0.08f * (u(rng) - 0.5f)};
  const float vessel_dark[3] = {0.35f, 0.55f, 0.45f};

  // Smooth choroidal pattern for the target background.
  struct Blob {
    float x, y, sigma, amp;
  };
  std::vector<Blob> choroid;
  for (int i = 0; i < 3; ++i)
    choroid.push_back({fs * u(rng), fs * u(rng), fs * (0.15f + 0.15f * u(rng)), 0.05f + 0.05f * u(rng)});

  // Lesions.
  Mask lesions(s, s);
  std::vector<float> blob_field(static_cast<std::size_t>(s) * s, 0.f);
  std::vector<std::uint8_t> wedge(static_cast<std::size_t>(s) * s, 0);
  if (label == 1) {
    const int count = 3 + static_cast<int>(u(rng) * 4.f);
    std::vector<Blob> blobs;
    for (int i = 0; i < count; ++i) {
      const float r = 0.35f * fs * std::sqrt(u(rng));
      const float a = 2.f * std::numbers::pi_v<float> * u(rng);
      blobs.push_back({fs * 0.5f + r * std::cos(a), fs * 0.5f + r * std::sin(a), unit * (1.2f + 1.3f * u(rng)), 1.f});
    }
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        float v = 0;
        for (const auto& b : blobs) {
          const float dx = x + 0.5f - b.x, dy = y + 0.5f - b.y;
          v += std::exp(-(dx * dx + dy * dy) / (2 * b.sigma * b.sigma));
        }
        v = std::min(v, 1.f);
        blob_field[static_cast<std::size_t>(y) * s + x] = v;
        if (v > 0.3f) lesions.at(y, x) = 1;
      }
  } else if (label == 2) {
    const float a0 = 2.f * std::numbers::pi_v<float> * u(rng);
    const float span = 0.7f + 0.5f * u(rng);
    const float r_in = 0.1f * fs;
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const float dx = x + 0.5f - cx, dy = y + 0.5f - cy;
        if (std::sqrt(dx * dx + dy * dy) < r_in) continue;
        float a = std::atan2(dy, dx) - a0;
        a = std::fmod(a + 4.f * std::numbers::pi_v<float>, 2.f * std::numbers::pi_v<float>);
        if (a <= span) {
          wedge[static_cast<std::size_t>(y) * s + x] = 1;
          lesions.at(y, x) = 1;
        }
      }
  }

  ImagePair pair;
  pair.label = label;
  pair.id = spec.class_names[static_cast<std::size_t>(label)] + "_" + std::to_string(index);
  pair.source = Image(s, s, 3);
  pair.target = Image(s, s, 3);
  pair.source_vessels = Mask(s, s);
  pair.target_vessels = Mask(s, s);
  pair.lesions = lesions;

  const float disc_sigma = 0.06f * fs;
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * s + x;
      const float px = x + 0.5f, py = y + 0.5f;
      const float rx = (px - fs / 2) / (fs / 2), ry = (py - fs / 2) / (fs / 2);
      const float illum = 1.f - 0.35f * (rx * rx + ry * ry);
      const float ddx = px - cx, ddy = py - cy;
      const float disc = std::exp(-(ddx * ddx + ddy * ddy) / (2 * disc_sigma * disc_sigma));
      const bool is_vessel = vessels.bits[p] != 0;
      const float k = std::min(1.f, caliber[p] / max_cal);
      const float blob = blob_field[p];
      const bool in_wedge = wedge[p] != 0;

      // Source: tinted background with darker vessels; lesions barely visible.
      for (int c = 0; c < 3; ++c) {
        float v = tint[c] * illum + (c == 2 ? 0.15f : 0.25f) * disc;
        if (is_vessel) v *= 1.f - vessel_dark[c] * (0.6f + 0.4f * k);
        const float exudate[3] = {1.f, 0.9f, 0.3f};
        v += li * 0.06f * blob * exudate[c];
        if (in_wedge) v *= 1.f - li * (c == 0 ? 0.03f : 0.07f);
        v += 0.008f * n(rng);
        pair.source.at(y, x, c) = std::clamp(v, 0.f, 1.f);
      }
      if (is_vessel) pair.source_vessels.at(y, x) = 1;

      // Target: dark background, bright vessels, strong lesions.
      float g = 0.18f * illum + 0.35f * disc;
      for (const auto& b : choroid) {
        const float dx = px - b.x, dy = py - b.y;
        g += b.amp * std::exp(-(dx * dx + dy * dy) / (2 * b.sigma * b.sigma));
      }
      if (is_vessel) {
        g += (0.8f - g) * (0.75f + 0.25f * k);
        pair.target_vessels.at(y, x) = 1;
      }
      g += li * 0.55f * blob;
      if (in_wedge) g *= std::max(0.f, 1.f - 0.7f * li);
      g = std::clamp(g, 0.f, 1.f);
      for (int c = 0; c < 3; ++c) pair.target.at(y, x, c) = g;
    }
  return pair;
}

std::vector<ImagePair> generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<ImagePair> out;
  for (int label = 0; label < spec.num_classes(); ++label)
    for (int i = 0; i < spec.n_per_class[static_cast<std::size_t>(label)]; ++i) out.push_back(generate_pair(spec, label, i));
  return out;
}

BalanceResult color_balance(const Image& image) {
  BalanceResult res{image, false};
  const int c = image.channels;
  const std::size_t hw = static_cast<std::size_t>(image.height) * image.width;
  if (hw == 0) return res;
  std::vector<double> means(static_cast<std::size_t>(c), 0.0);
  for (std::size_t p = 0; p < hw; ++p)
    for (int ch = 0; ch < c; ++ch) means[static_cast<std::size_t>(ch)] += image.data[p * c + ch];
  double global = 0;
  for (auto& m : means) {
    m /= static_cast<double>(hw);
    global += m;
  }
  global /= c;
  for (int ch = 0; ch < c; ++ch) {
    const double m = means[static_cast<std::size_t>(ch)];
    if (m <= 0.0) {
      res.degenerate = true;
      continue;
    }
    const double scale = global / m;
    for (std::size_t p = 0; p < hw; ++p) {
      float& v = res.image.data[p * c + ch];
      v = static_cast<float>(std::clamp(v * scale, 0.0, 1.0));
    }
  }
  return res;
}

BalanceTarget parse_balance_target(const std::string& s) {
  if (s == "none") return BalanceTarget::kNone;
  if (s == "source") return BalanceTarget::kSource;
  if (s == "target") return BalanceTarget::kTarget;
  if (s == "both") return BalanceTarget::kBoth;
  throw ConfigError("color balance target must be one of none|source|target|both, got '" + s + "'");
}

void apply_color_balance(std::vector<ImagePair>& pairs, BalanceTarget which) {
  for (auto& p : pairs) {
    if (which == BalanceTarget::kSource || which == BalanceTarget::kBoth) p.source = color_balance(p.source).image;
    if (which == BalanceTarget::kTarget || which == BalanceTarget::kBoth) p.target = color_balance(p.target).image;
  }
}

namespace {

Image crop_image(const Image& img, int y0, int x0, int size) {
  Image out(size, size, img.channels);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
  return out;
}

Mask crop_mask(const Mask& m, int y0, int x0, int size) {
  if (m.empty()) return m;
  Mask out(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) out.at(y, x) = m.at(y0 + y, x0 + x);
  return out;
}

}  // namespace

std::vector<ImagePair> crop_patches(const ImagePair& pair, int n, int patch_size, Rng& rng) {
  const int h = pair.source.height, w = pair.source.width;
  if (!pair.source.same_shape(pair.target)) throw Error("crop_patches: source/target shapes differ");
  if (patch_size <= 0 || patch_size > std::min(h, w))
    throw Error("crop_patches: patch size " + std::to_string(patch_size) + " exceeds image " + std::to_string(h) +
                "x" + std::to_string(w));
  std::uniform_int_distribution<int> dy(0, h - patch_size), dx(0, w - patch_size);
  std::vector<ImagePair> out;
  out.reserve(static_cast<std::size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) {
    const int y0 = dy(rng), x0 = dx(rng);
    ImagePair p;
    p.label = pair.label;
    p.id = pair.id + "_c" + std::to_string(i);
    p.source = crop_image(pair.source, y0, x0, patch_size);
    p.target = crop_image(pair.target, y0, x0, patch_size);
    p.source_vessels = crop_mask(pair.source_vessels, y0, x0, patch_size);
    p.target_vessels = crop_mask(pair.target_vessels, y0, x0, patch_size);
    p.lesions = crop_mask(pair.lesions, y0, x0, patch_size);
    out.push_back(std::move(p));
  }
  return out;
}

Split split_stratified(const std::vector<ImagePair>& samples, double train_frac, std::uint64_t seed) {
  if (!(train_frac > 0 && train_frac < 1)) throw Error("split_stratified: train_frac must be in (0, 1)");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < samples.size(); ++i) by_class[samples[i].label].push_back(i);
  Rng rng(seed);
  Split split;
  for (auto& [label, idx] : by_class) {
    if (idx.size() < 2)
      throw Error("split_stratified: class " + std::to_string(label) + " has fewer than 2 samples");
    std::shuffle(idx.begin(), idx.end(), rng);
    const double want = train_frac * static_cast<double>(idx.size());
    auto n_train = static_cast<std::size_t>(std::floor(want + 0.5));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    for (std::size_t k = 0; k < idx.size(); ++k) (k < n_train ? split.train : split.test).push_back(samples[idx[k]]);
  }
  return split;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write manifest '" + path.string() + "'");
  for (const auto& e : entries) out << e.id << '\t' << e.label << '\t' << e.source_path << '\t' << e.target_path << '\n';
  if (!out) throw Error("failed writing manifest '" + path.string() + "'");
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingDataError("cannot read manifest '" + path.string() + "'");
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 4)
      throw Error("manifest '" + path.string() + "' line " + std::to_string(lineno) + ": expected 4 tab-separated fields");
    out.push_back({fields[0], fields[1], fields[2], fields[3]});
  }
  return out;
}

void write_dataset(const std::vector<ImagePair>& pairs, const DatasetSpec& spec, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "source", ec);
  fs::create_directories(dir / "target", ec);
  if (ec) throw Error("cannot create dataset directory '" + dir.string() + "': " + ec.message());
  std::vector<ManifestEntry> entries;
  for (const auto& p : pairs) {
    const std::string src = "source/" + p.id + ".png", tgt = "target/" + p.id + ".png";
    write_png(p.source, dir / src);
    write_png(p.target, dir / tgt);
    entries.push_back({p.id, spec.class_names.at(static_cast<std::size_t>(p.label)), src, tgt});
  }
  write_manifest(entries, dir / "manifest.tsv");
}

std::vector<ImagePair> load_dataset(const std::filesystem::path& dir, const DatasetSpec& spec) {
  std::vector<ImagePair> out;
  for (const auto& e : read_manifest(dir / "manifest.tsv")) {
    ImagePair p;
    p.id = e.id;
    p.label = spec.label_of(e.label);
    for (const auto& [path, img] : {std::pair{e.source_path, &p.source}, std::pair{e.target_path, &p.target}}) {
      const auto full = dir / path;
      if (!std::filesystem::exists(full)) throw MissingDataError("missing image listed in manifest: " + full.string());
      *img = read_png(full);
    }
    if (!p.source.same_shape(p.target)) throw Error("pair '" + p.id + "' has mismatched image sizes");
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace ffa
