#include "canet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "canet/errors.hpp"
#include "canet/image.hpp"
#include "json.hpp"

namespace canet {
namespace {

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
  return s.substr(i);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int parse_grade(const std::string& cell, const std::string& where) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(cell, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != cell.size()) throw DataError(where + ": grade '" + cell + "' is not an integer");
  return v;
}

}  // namespace

std::vector<GradingSample> load_manifest(const std::filesystem::path& path, const ManifestOptions& opt) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != "filename,grade_a,grade_b") {
    throw DataError("manifest " + path.string() + ": header must be 'filename,grade_a,grade_b'");
  }
  const auto base = path.parent_path();
  std::vector<GradingSample> samples;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const std::string where = "manifest " + path.string() + " row " + std::to_string(row);
    const auto cells = split_csv(line);
    if (cells.size() != 3 || cells[0].empty()) throw DataError(where + ": expected 3 fields");
    int a = parse_grade(cells[1], where);
    const int b = parse_grade(cells[2], where);
    if (!opt.grade_a_map.empty()) {
      if (a < 0 || a >= static_cast<int>(opt.grade_a_map.size())) {
        throw DataError(where + ": grade_a " + std::to_string(a) + " has no entry in the label map");
      }
      a = opt.grade_a_map[static_cast<std::size_t>(a)];
    }
    if (a < 0 || a >= static_cast<int>(opt.num_classes_a)) {
      throw DataError(where + ": grade_a " + std::to_string(a) + " outside [0, " +
                      std::to_string(opt.num_classes_a) + ")");
    }
    if (b < 0 || b >= static_cast<int>(opt.num_classes_b)) {
      throw DataError(where + ": grade_b " + std::to_string(b) + " outside [0, " +
                      std::to_string(opt.num_classes_b) + ")");
    }
    const auto file = base / cells[0];
    if (!std::filesystem::exists(file)) throw DataError(where + ": image " + file.string() + " not found");
    GradingSample s;
    s.image = image_to_tensor(read_pnm(file), 3);
    if (opt.resize_to) s.image = resize_bilinear(s.image, opt.resize_to, opt.resize_to);
    s.grade_a = a;
    s.grade_b = b;
    s.id = cells[0];
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw DataError("manifest " + path.string() + " lists no samples");
  return samples;
}

void write_manifest(const std::filesystem::path& path,
                    const std::vector<std::pair<std::string, GradePair>>& rows) {
  std::ofstream out(path, std::ios::binary);
  out << "filename,grade_a,grade_b\n";
  for (const auto& [name, g] : rows) out << name << ',' << g.a << ',' << g.b << '\n';
  if (!out) throw DataError("cannot write manifest " + path.string());
}

NormStats compute_norm_stats(std::span<const GradingSample> samples) {
  if (samples.empty()) throw DataError("normalization: empty dataset");
  NormStats st;
  std::array<double, 3> sum{}, sq{};
  double count = 0;
  for (const auto& s : samples) {
    if (s.image.rank() != 3 || s.image.dim(0) != 3) throw DataError("normalization: images must be 3×H×W");
    const std::size_t hw = s.image.dim(1) * s.image.dim(2);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < hw; ++i) {
        const double v = s.image[c * hw + i];
        sum[c] += v;
        sq[c] += v * v;
      }
    }
    count += static_cast<double>(hw);
  }
  for (std::size_t c = 0; c < 3; ++c) {
    st.mean[c] = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - st.mean[c] * st.mean[c]);
    st.std[c] = std::max(std::sqrt(var), 1e-6);
  }
  return st;
}

NormStats cached_norm_stats(const std::filesystem::path& cache_path, std::span<const GradingSample> samples) {
  using nlohmann::json;
  if (std::filesystem::exists(cache_path)) {
    std::ifstream in(cache_path);
    try {
      const json j = json::parse(in);
      NormStats st;
      st.mean = j.at("mean").get<std::array<double, 3>>();
      st.std = j.at("std").get<std::array<double, 3>>();
      return st;
    } catch (const json::exception& e) {
      throw DataError("normalization cache " + cache_path.string() + " is malformed: " + e.what());
    }
  }
  const NormStats st = compute_norm_stats(samples);
  std::ofstream out(cache_path);
  out << json{{"mean", st.mean}, {"std", st.std}}.dump() << '\n';
  return st;
}

void normalize(Tensor<float>& image, const NormStats& stats) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DataError("normalize: image must be 3×H×W");
  const std::size_t hw = image.dim(1) * image.dim(2);
  for (std::size_t c = 0; c < 3; ++c) {
    const float m = static_cast<float>(stats.mean[c]);
    const float inv = static_cast<float>(1.0 / stats.std[c]);
    for (std::size_t i = 0; i < hw; ++i) image[c * hw + i] = (image[c * hw + i] - m) * inv;
  }
}

void SynthSpec::validate() const {
  const std::size_t ka = grade_a_probs.size();
  if (ka < 2) throw ParameterError("synth: need at least two grades for disease a");
  if (count_ranges.size() != ka) throw ParameterError("synth: count_ranges must have one range per grade a");
  double total = 0;
  for (double p : grade_a_probs) {
    if (!(p >= 0)) throw ParameterError("synth: grade_a_probs must be non-negative");
    total += p;
  }
  if (!(total > 0)) throw ParameterError("synth: grade_a_probs sum to zero");
  for (const auto& r : count_ranges) {
    if (r[0] < 0 || r[1] < r[0]) throw ParameterError("synth: count ranges must satisfy 0 <= lo <= hi");
  }
  if (!(rho >= 0 && rho <= 1)) throw ParameterError("synth: rho must lie in [0, 1]");
  const double closest = marker_radius + lesion_radius + 1.0;
  if (!(closest < near_px && near_px < far_px)) {
    throw ParameterError("synth: thresholds must satisfy marker+lesion clearance < near_px < far_px");
  }
  if (!b_given_a.empty() && b_given_a.size() != ka) {
    throw ParameterError("synth: b_given_a must have one row per grade a");
  }
  if (image_size < 16) throw ParameterError("synth: image_size must be >= 16");
}

SynthSpec SynthSpec::binary_preset() { return SynthSpec{}; }

SynthSpec SynthSpec::messidor_preset() {
  SynthSpec s;
  // Joint label counts of the source table (rows DR 0..3, columns DME 0..2).
  const double counts[4][3] = {{546, 0, 0}, {142, 5, 6}, {182, 28, 37}, {104, 42, 108}};
  s.grade_a_probs.clear();
  s.b_given_a.clear();
  for (const auto& row : counts) {
    const double n = row[0] + row[1] + row[2];
    s.grade_a_probs.push_back(n / 1200.0);
    s.b_given_a.push_back({row[0] / n, row[1] / n, row[2] / n});
  }
  s.count_ranges = {{0, 0}, {1, 3}, {4, 7}, {8, 12}};
  return s;
}

namespace {

std::size_t sample_categorical(std::span<const double> probs, RngState& rng) {
  const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (u < probs[i]) return i;
    u -= probs[i];
  }
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0) return i;
  }
  return 0;
}

struct Point {
  double y, x;
};

double dist(Point a, Point b) { return std::hypot(a.y - b.y, a.x - b.x); }

// Antialiased disc coverage of a pixel centre at distance d from a disc of radius r.
double coverage(double d, double r) { return std::clamp(r + 0.5 - d, 0.0, 1.0); }

}  // namespace

SynthSample synth_one(const SynthSpec& spec, std::size_t index) {
  spec.validate();
  RngState rng = RngState(spec.seed).split(index);
  const std::size_t ka = spec.num_classes_a();
  const int a = static_cast<int>(sample_categorical(spec.grade_a_probs, rng));
  const auto range = spec.count_ranges[static_cast<std::size_t>(a)];
  const int k = range[0] + static_cast<int>(rng.below(static_cast<std::uint64_t>(range[1] - range[0] + 1)));

  int b = 0;
  if (k > 0) {
    std::array<double, 3> pb;
    if (!spec.b_given_a.empty()) {
      pb = spec.b_given_a[static_cast<std::size_t>(a)];
    } else {
      const double s = static_cast<double>(a) / static_cast<double>(ka - 1);
      for (std::size_t j = 0; j < 3; ++j) pb[j] = (1 - spec.rho * s) * spec.base_b[j] + (j == 2 ? spec.rho * s : 0.0);
    }
    b = static_cast<int>(sample_categorical(pb, rng));
  }

  const double size = static_cast<double>(spec.image_size);
  const Point centre{size / 2, size / 2};
  const double disc_r = 0.45 * size;
  const double lesion_reach = disc_r - spec.lesion_radius - 1.0;
  const double clearance = spec.marker_radius + spec.lesion_radius + 1.0;
  const double lo = b == 2 ? clearance : (b == 1 ? spec.near_px : spec.far_px);
  const double hi = b == 2 ? spec.near_px : (b == 1 ? spec.far_px : std::numeric_limits<double>::infinity());
  const double separation = 2 * spec.lesion_radius + 1.0;

  Point marker{};
  std::vector<Point> lesions;
  bool placed = false;
  for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
    const double mr = spec.marker_jitter * std::sqrt(rng.uniform());
    const double mt = rng.uniform(0, 2 * std::numbers::pi);
    marker = {centre.y + mr * std::sin(mt), centre.x + mr * std::cos(mt)};
    lesions.clear();
    auto random_in_disc = [&] {
      const double r = lesion_reach * std::sqrt(rng.uniform());
      const double t = rng.uniform(0, 2 * std::numbers::pi);
      return Point{centre.y + r * std::sin(t), centre.x + r * std::cos(t)};
    };
    auto try_place = [&](bool anchor) {
      for (int tries = 0; tries < 2000; ++tries) {
        const Point p = random_in_disc();
        const double d = dist(p, marker);
        if (d < lo || (anchor && d >= hi)) continue;
        bool clear = true;
        for (const Point& q : lesions) clear = clear && dist(p, q) >= separation;
        if (!clear) continue;
        lesions.push_back(p);
        return true;
      }
      return false;
    };
    placed = true;
    for (int i = 0; i < k && placed; ++i) placed = try_place(i == 0);
  }
  if (!placed) {
    throw ParameterError("synth: cannot place " + std::to_string(k) + " lesions with nearest distance in [" +
                         std::to_string(lo) + ", " + std::to_string(hi) + ") inside a " +
                         std::to_string(spec.image_size) + "px disc");
  }

  // Render: dark vignetted disc, bright marker, bright lesions, light noise.
  const std::size_t n = spec.image_size;
  Tensor<float> img({3, n, n});
  const double disc_rgb[3] = {0.45, 0.18, 0.10};
  const double marker_rgb[3] = {0.20, 0.60, 0.85};
  const double lesion_rgb[3] = {0.95, 0.85, 0.35};
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const Point p{static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5};
      const double rd = dist(p, centre);
      const double inside = coverage(rd, disc_r);
      const double shade = 1.0 - 0.35 * (rd / disc_r) * (rd / disc_r);
      const double m = coverage(dist(p, marker), spec.marker_radius);
      double l = 0;
      for (const Point& q : lesions) l = std::max(l, coverage(dist(p, q), spec.lesion_radius));
      for (std::size_t c = 0; c < 3; ++c) {
        double v = inside * disc_rgb[c] * shade;
        v = v * (1 - m) + marker_rgb[c] * m;
        v = v * (1 - l) + lesion_rgb[c] * l;
        v += spec.noise * rng.normal();
        img[(c * n + y) * n + x] = static_cast<float>(v);
      }
    }
  }

  SynthSample out;
  // Round-trip through 8-bit so in-memory and on-disk datasets agree exactly.
  out.sample.image = image_to_tensor(tensor_to_image(img), 3);
  out.sample.grade_a = a;
  out.sample.grade_b = b;
  char name[32];
  std::snprintf(name, sizeof name, "img_%05zu.ppm", index);
  out.sample.id = name;
  out.lesions = k;
  out.min_distance = std::numeric_limits<double>::infinity();
  for (const Point& q : lesions) out.min_distance = std::min(out.min_distance, dist(q, marker));
  return out;
}

std::vector<GradingSample> synth_generate(const SynthSpec& spec, std::size_t n) {
  if (n == 0) throw ParameterError("synth: n must be >= 1");
  spec.validate();
  std::vector<GradingSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth_one(spec, i).sample);
  return out;
}

std::vector<GradingSample> synth_generate_to_disk(const SynthSpec& spec, std::size_t n,
                                                  const std::filesystem::path& dir) {
  auto samples = synth_generate(spec, n);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("synth: cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::pair<std::string, GradePair>> rows;
  for (const auto& s : samples) {
    write_pnm(dir / s.id, tensor_to_image(s.image));
    rows.push_back({s.id, {s.grade_a, s.grade_b}});
  }
  write_manifest(dir / "manifest.csv", rows);
  return samples;
}

std::vector<Fold> kfold_split(std::span<const GradePair> labels, std::size_t k, std::uint64_t seed) {
  const std::size_t n = labels.size();
  if (k < 2) throw ParameterError("kfold: k must be >= 2");
  if (k > n) throw ParameterError("kfold: k = " + std::to_string(k) + " exceeds sample count " + std::to_string(n));
  std::map<std::pair<int, int>, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < n; ++i) strata[{labels[i].a, labels[i].b}].push_back(i);
  RngState rng(seed);
  std::vector<Fold> folds(k);
  // Dealing the concatenated, per-stratum shuffled order round-robin keeps
  // fold sizes within one and spreads each stratum evenly.
  std::size_t slot = 0;
  for (auto& [key, idx] : strata) {
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    for (std::size_t i : idx) folds[slot++ % k].test.push_back(i);
  }
  for (auto& f : folds) {
    std::sort(f.test.begin(), f.test.end());
    std::vector<bool> in_test(n, false);
    for (std::size_t i : f.test) in_test[i] = true;
    for (std::size_t i = 0; i < n; ++i) {
      if (!in_test[i]) f.train.push_back(i);
    }
  }
  return folds;
}

std::vector<GradePair> labels_of(std::span<const GradingSample> samples) {
  std::vector<GradePair> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.grade_a, s.grade_b});
  return out;
}

}  // namespace canet
