#include "caap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "caap/error.hpp"
#include "caap/parallel.hpp"

namespace caap {

double PerturbationCurve::auc() const {
  double area = 0.0;
  for (std::size_t t = 1; t < scores.size(); ++t) {
    area += 0.5 * (scores[t - 1] + scores[t]) * (fractions[t] - fractions[t - 1]);
  }
  return area;
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string PerturbationCurve::to_csv() const {
  std::string out = "fraction,score\n";
  for (std::size_t t = 0; t < scores.size(); ++t) {
    out += format_double(fractions[t]) + "," + format_double(scores[t]) + "\n";
  }
  return out;
}

std::vector<int> rank_patches(std::span<const float> scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)]; });
  return order;
}

ClassScorer class_probability(const ModelBundle& model, int class_id) {
  if (class_id < 0 || class_id >= model.config.classes) {
    throw Error(ErrorKind::kConfig, "class " + std::to_string(class_id) + " outside model range");
  }
  return [&model, class_id](const Image& img) {
    return static_cast<double>(forward_full(model, img).probs(class_id));
  };
}

namespace {

void check_map(const Image& x, std::span<const float> map, int grid) {
  if (grid <= 0 || static_cast<int>(map.size()) != grid * grid || x.height != x.width || x.width % grid != 0) {
    throw Error(ErrorKind::kShape, "map of " + std::to_string(map.size()) + " scores does not tile a " +
                                       std::to_string(x.height) + "x" + std::to_string(x.width) + " image");
  }
}

// Evaluates `score` on every step image produced by `make_step(t)`, t = 0..N.
template <typename MakeStep>
PerturbationCurve run_curve(const ClassScorer& score, int n, int threads, MakeStep&& make_step) {
  PerturbationCurve curve;
  curve.fractions.resize(static_cast<std::size_t>(n) + 1);
  curve.scores.resize(static_cast<std::size_t>(n) + 1);
  for (int t = 0; t <= n; ++t) curve.fractions[static_cast<std::size_t>(t)] = static_cast<double>(t) / n;
  parallel_for(n + 1, threads, [&](int t) { curve.scores[static_cast<std::size_t>(t)] = score(make_step(t)); });
  return curve;
}

}  // namespace

PerturbationCurve deletion_curve(const ClassScorer& score, const Image& x, std::span<const float> map, int grid,
                                 float reference, int threads) {
  check_map(x, map, grid);
  const int patch_px = x.width / grid;
  const std::vector<int> order = rank_patches(map);
  return run_curve(score, grid * grid, threads, [&](int t) {
    Image img = x;
    for (int k = 0; k < t; ++k) fill_patch(img, order[static_cast<std::size_t>(k)], patch_px, reference);
    return img;
  });
}

PerturbationCurve insertion_curve(const ClassScorer& score, const Image& x, std::span<const float> map, int grid,
                                  int blur_kernel, int threads) {
  check_map(x, map, grid);
  const Image blurred = box_blur(x, blur_kernel, 2);
  const int patch_px = x.width / grid;
  const std::vector<int> order = rank_patches(map);
  return run_curve(score, grid * grid, threads, [&](int t) {
    Image img = blurred;
    for (int k = 0; k < t; ++k) copy_patch(x, img, order[static_cast<std::size_t>(k)], patch_px);
    return img;
  });
}

std::vector<double> minmax_normalize(std::span<const float> map) {
  std::vector<double> out(map.size(), 0.5);
  if (map.empty()) return out;
  const auto [lo, hi] = std::minmax_element(map.begin(), map.end());
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  if (range <= 0.0) return out;
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = (static_cast<double>(map[i]) - *lo) / range;
  return out;
}

namespace {

int mask_patch_px(const SegMask& mask, int grid, std::size_t map_size) {
  if (grid <= 0 || static_cast<int>(map_size) != grid * grid || mask.height != mask.width ||
      mask.width % grid != 0) {
    throw Error(ErrorKind::kShape, "mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                                       " does not match a " + std::to_string(grid) + "x" +
                                       std::to_string(grid) + " map");
  }
  return mask.width / grid;
}

}  // namespace

double aupr(std::span<const float> map, int grid, const SegMask& mask, Polarity positive) {
  const int patch_px = mask_patch_px(mask, grid, map.size());
  std::vector<double> score = minmax_normalize(map);
  const bool fg = positive == Polarity::kForeground;
  if (!fg) {
    for (auto& s : score) s = 1.0 - s;
  }
  // Pixels are patch-constant, so tally positives/negatives per patch.
  std::map<double, std::pair<long, long>, std::greater<>> by_threshold;
  long total_pos = 0;
  for (int i = 0; i < grid * grid; ++i) {
    long pos = 0;
    const int y0 = (i / grid) * patch_px;
    const int x0 = (i % grid) * patch_px;
    for (int y = y0; y < y0 + patch_px; ++y) {
      for (int x = x0; x < x0 + patch_px; ++x) pos += (mask.at(y, x) == fg) ? 1 : 0;
    }
    auto& cell = by_threshold[score[static_cast<std::size_t>(i)]];
    cell.first += pos;
    cell.second += static_cast<long>(patch_px) * patch_px - pos;
    total_pos += pos;
  }
  if (total_pos == 0) {
    throw Error(ErrorKind::kConfig, std::string("aupr: mask has no ") + (fg ? "foreground" : "background") +
                                        " pixels");
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  long tp = 0;
  long fp = 0;
  for (const auto& [threshold, counts] : by_threshold) {
    tp += counts.first;
    fp += counts.second;
    const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

int pointing_game(std::span<const float> map, int grid, const SegMask& mask) {
  const int patch_px = mask_patch_px(mask, grid, map.size());
  if (mask.foreground_count() == 0) throw Error(ErrorKind::kConfig, "pointing game: mask has no foreground");
  int best_y = 0;
  int best_x = 0;
  float best = -INFINITY;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      const float v = map[static_cast<std::size_t>((y / patch_px) * grid + x / patch_px)];
      if (v > best) {
        best = v;
        best_y = y;
        best_x = x;
      }
    }
  }
  return mask.at(best_y, best_x) ? 1 : 0;
}

namespace {

std::vector<double> nonnegative(std::span<const double> scores) {
  std::vector<double> a(scores.begin(), scores.end());
  const double lo = *std::min_element(a.begin(), a.end());
  if (lo < 0.0) {
    for (auto& v : a) v -= lo;
  }
  return a;
}

}  // namespace

double entropy_norm(std::span<const double> scores) {
  if (scores.size() < 2) throw Error(ErrorKind::kShape, "entropy needs at least two scores");
  const std::vector<double> a = nonnegative(scores);
  double total = 0.0;
  for (double v : a) total += v;
  if (total <= 0.0) return 1.0;
  if (std::all_of(a.begin(), a.end(), [&](double v) { return v == a.front(); })) return 1.0;
  double h = 0.0;
  for (double v : a) {
    if (v > 0.0) {
      const double p = v / total;
      h -= p * std::log(p);
    }
  }
  return h / std::log(static_cast<double>(a.size()));
}

double gini(std::span<const double> scores) {
  if (scores.empty()) throw Error(ErrorKind::kShape, "gini needs at least one score");
  std::vector<double> a = nonnegative(scores);
  std::sort(a.begin(), a.end());
  const double n = static_cast<double>(a.size());
  double total = 0.0;
  double weighted = 0.0;
  // The coefficients sum to zero, so measuring from a[0] changes nothing
  // except that equal maps come out as exactly 0.
  for (std::size_t i = 0; i < a.size(); ++i) {
    total += a[i];
    weighted += (2.0 * static_cast<double>(i + 1) - n - 1.0) * (a[i] - a.front());
  }
  if (total <= 0.0) throw Error(ErrorKind::kConfig, "gini is undefined for a map without mass");
  return weighted / (n * total);
}

namespace {

std::vector<double> average_ranks(std::span<const float> v) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v[static_cast<std::size_t>(a)] < v[static_cast<std::size_t>(b)]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[static_cast<std::size_t>(idx[j + 1])] == v[static_cast<std::size_t>(idx[i])]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[static_cast<std::size_t>(idx[k])] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.size() < 2) throw Error(ErrorKind::kShape, "spearman needs two equal-length series");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

void MetricReport::finalize() {
  if (del_auc && ins_auc) ins_minus_del = *ins_auc - *del_auc;
}

std::vector<std::pair<std::string, double>> MetricReport::entries() const {
  std::vector<std::pair<std::string, double>> out;
  auto add = [&](const char* key, const std::optional<double>& v) {
    if (v) out.emplace_back(key, *v);
  };
  add("del_auc", del_auc);
  add("ins_auc", ins_auc);
  add("ins_minus_del", ins_minus_del);
  add("aupr1", aupr1);
  add("aupr0", aupr0);
  add("pg_hit", pg_hit);
  add("entropy", entropy);
  add("gini", gini);
  return out;
}

std::string MetricReport::to_text() const {
  std::string out;
  for (const auto& [k, v] : entries()) out += k + "=" + format_double(v) + "\n";
  return out;
}

}  // namespace caap
