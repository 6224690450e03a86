#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "caap/caap.hpp"
#include "caap/error.hpp"
#include "caap/metrics.hpp"
#include "caap/random.hpp"
#include "caap/toy.hpp"
#include "oracle.hpp"

using namespace caap;

namespace {

struct Fixture {
  ModelBundle model;
  Image x, x0;
  ActivationCache src, blank;
};

Fixture planted(std::uint64_t seed = 7, int patch = 5) {
  ToySpec spec;
  spec.seed = seed;
  Fixture f;
  f.model = gen_model(spec);
  std::tie(f.x, f.x0) = gen_planted_pair(spec, patch);
  f.src = forward_full(f.model, f.x);
  f.blank = forward_full(f.model, f.x0);
  return f;
}

PatchRequest request(int class_id, SelectionOp select = SelectionOp::box(1), LayerRange range = {1, 4}) {
  PatchRequest r;
  r.class_id = class_id;
  r.select = select;
  r.range = range;
  return r;
}

float spread(const AttributionMap& m) { return m.scores.maxCoeff() - m.scores.minCoeff(); }

double variance(const Image& img) {
  double mean = 0.0;
  for (float v : img.data) mean += v;
  mean /= static_cast<double>(img.data.size());
  double var = 0.0;
  for (float v : img.data) var += (v - mean) * (v - mean);
  return var / static_cast<double>(img.data.size());
}

int predicted_class(const ActivationCache& c) {
  Eigen::Index k;
  c.probs.maxCoeff(&k);
  return static_cast<int>(k);
}

}  // namespace

TEST(Selection, BoxGeometry) {
  EXPECT_EQ(build_selection(SelectionOp::box(1), 5, 4).size(), 9u);
  EXPECT_EQ(build_selection(SelectionOp::box(1), 0, 4), (std::vector<int>{0, 1, 4, 5}));
  EXPECT_EQ(build_selection(SelectionOp::box(1), 1, 4).size(), 6u);
  EXPECT_EQ(build_selection(SelectionOp::box(2), 5, 4).size(), 16u);
}

TEST(Selection, ManhattanIsCross) {
  EXPECT_EQ(build_selection(SelectionOp::manhattan(1), 5, 4), (std::vector<int>{1, 4, 5, 6, 9}));
  EXPECT_EQ(build_selection(SelectionOp::no_pad(), 7, 4), (std::vector<int>{7}));
}

TEST(Selection, AlwaysHoldsCenterAndStaysInGrid) {
  for (const auto op : {SelectionOp::no_pad(), SelectionOp::box(1), SelectionOp::box(2), SelectionOp::manhattan(1),
                        SelectionOp::manhattan(3)}) {
    for (int g : {2, 3, 5}) {
      for (int c = 0; c < g * g; ++c) {
        const auto s = build_selection(op, c, g);
        EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
        EXPECT_NE(std::find(s.begin(), s.end(), c), s.end());
        EXPECT_GE(s.front(), 0);
        EXPECT_LT(s.back(), g * g);
      }
    }
  }
}

TEST(Selection, ParseAndErrors) {
  EXPECT_EQ(SelectionOp::parse("nopad"), SelectionOp::no_pad());
  EXPECT_EQ(SelectionOp::parse("box2"), SelectionOp::box(2));
  EXPECT_EQ(SelectionOp::parse("manhattan1"), SelectionOp::manhattan(1));
  EXPECT_EQ(SelectionOp::box(1).name(), "box1");
  EXPECT_THROW(SelectionOp::parse("box"), Error);
  EXPECT_THROW(SelectionOp::parse("box0"), Error);
  EXPECT_THROW(SelectionOp::parse("disk1"), Error);
  EXPECT_THROW(build_selection(SelectionOp::box(1), 16, 4), Error);
  EXPECT_THROW(build_selection(SelectionOp::box(1), -1, 4), Error);
}

TEST(Blank, ConstantKinds) {
  const Image white = make_blank(BlankSpec::of(BlankSpec::Kind::kWhite), 2, 2, 1);
  EXPECT_EQ(white.data, std::vector<float>(4, 1.0f));
  const Image black = make_blank(BlankSpec::of(BlankSpec::Kind::kBlack), 3, 2, 3);
  EXPECT_EQ(black.data, std::vector<float>(18, 0.0f));
  const Image mean = make_blank(BlankSpec::of(BlankSpec::Kind::kMean), 2, 2, 3);
  EXPECT_EQ(mean.at(1, 1, 0), 0.485f);
  EXPECT_EQ(mean.at(0, 1, 1), 0.456f);
  EXPECT_EQ(mean.at(1, 0, 2), 0.406f);
}

TEST(Blank, NoisyIsSeededAndClamped) {
  BlankSpec s = BlankSpec::of(BlankSpec::Kind::kNoisy);
  s.seed = 3;
  s.sigma = 0.6f;
  const Image a = make_blank(s, 16, 16, 3), b = make_blank(s, 16, 16, 3);
  EXPECT_EQ(a, b);
  EXPECT_GE(*std::min_element(a.data.begin(), a.data.end()), 0.0f);
  EXPECT_LE(*std::max_element(a.data.begin(), a.data.end()), 1.0f);
  s.seed = 4;
  EXPECT_NE(make_blank(s, 16, 16, 3), a);
}

TEST(Blank, BlurReducesVariance) {
  BlankSpec noisy = BlankSpec::of(BlankSpec::Kind::kNoisy);
  noisy.sigma = 0.2f;
  BlankSpec blurred = noisy;
  blurred.kind = BlankSpec::Kind::kBlurNoisy;
  blurred.kernel = 5;
  EXPECT_LT(variance(make_blank(blurred, 64, 64, 1)), variance(make_blank(noisy, 64, 64, 1)));
  blurred.kernel = 4;
  EXPECT_THROW(make_blank(blurred, 8, 8, 1), Error);
}

TEST(LayerRange, AutoAndParse) {
  EXPECT_EQ(LayerRange::automatic(12), (LayerRange{1, 8}));
  EXPECT_EQ(LayerRange::automatic(24), (LayerRange{1, 16}));
  EXPECT_EQ(LayerRange::parse("auto", 6), (LayerRange{1, 4}));
  EXPECT_EQ(LayerRange::parse("2..5", 6), (LayerRange{2, 5}));
  EXPECT_THROW(LayerRange::parse("2..7", 6), Error);
  EXPECT_THROW(LayerRange::parse("0..3", 6), Error);
  EXPECT_THROW(LayerRange::parse("4..3", 6), Error);
  EXPECT_THROW(LayerRange::parse("3", 6), Error);
}

TEST(Mode, NamesRoundTrip) {
  for (auto m : {AttributionMode::kNaive, AttributionMode::kParallel, AttributionMode::kApprox,
                 AttributionMode::kInputInsert, AttributionMode::kInputDelete}) {
    EXPECT_EQ(parse_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_mode("fast"), Error);
}

TEST(Naive, MapContract) {
  const Fixture f = planted();
  const AttributionMap m = caap_naive(f.model, f.src, f.blank, request(2));
  EXPECT_EQ(m.scores.size(), 16);
  EXPECT_GE(m.scores.minCoeff(), 0.0f);
  EXPECT_LE(m.scores.maxCoeff(), 1.0f);
  EXPECT_EQ(m.mode, AttributionMode::kNaive);
  EXPECT_EQ(m.model_fingerprint, f.model.fingerprint());
}

TEST(Naive, MatchesLayerLoopOracle) {
  const Fixture f = planted();
  const LayerRange range{2, 5};
  const AttributionMap m = caap_naive(f.model, f.src, f.blank, request(1, SelectionOp::manhattan(1), range));
  for (int p = 0; p < 16; ++p) {
    const auto ref = oracle::patched_probs(f.model, f.src, f.blank, build_selection(SelectionOp::manhattan(1), p, 4), range);
    EXPECT_NEAR(m.scores(p), ref(1), 1e-6) << "patch " << p;
  }
}

TEST(Naive, IdentityGivesBlankProbability) {
  Fixture f = planted();
  const AttributionMap m = caap_naive(f.model, f.blank, f.blank, request(2));
  EXPECT_LE((m.scores.array() - f.blank.probs(2)).abs().maxCoeff(), 1e-6f);
}

TEST(Naive, PlantedPatchWins) {
  for (int p : {5, 10}) {
    const Fixture f = planted(7, p);
    const int y = predicted_class(f.src);
    const AttributionMap m = caap_naive(f.model, f.src, f.blank, request(y, SelectionOp::no_pad()));
    Eigen::Index best;
    m.scores.maxCoeff(&best);
    EXPECT_EQ(best, p);
  }
}

TEST(Naive, ThreadsDoNotChangeBits) {
  const Fixture f = planted();
  EXPECT_EQ(caap_naive(f.model, f.src, f.blank, request(2), 1).scores,
            caap_naive(f.model, f.src, f.blank, request(2), 8).scores);
}

TEST(Parallel, MatchesNaive) {
  for (std::uint64_t seed : {7, 11}) {
    const Fixture f = planted(seed, 6);
    for (const auto op : {SelectionOp::no_pad(), SelectionOp::box(1), SelectionOp::manhattan(1)}) {
      for (const LayerRange r : {LayerRange{1, 4}, LayerRange{1, 6}, LayerRange{3, 5}}) {
        const auto req = request(3, op, r);
        const AttributionMap a = caap_naive(f.model, f.src, f.blank, req);
        const AttributionMap b = caap_parallel(f.model, f.src, f.blank, req, 3);
        EXPECT_LE((a.scores - b.scores).cwiseAbs().maxCoeff(), 1e-5f) << op.name() << " " << r.start << ".." << r.end;
      }
    }
  }
}

TEST(Parallel, PatchOrderIsIrrelevant) {
  const Fixture f = planted();
  std::vector<int> order(16);
  std::iota(order.begin(), order.end(), 0);
  std::reverse(order.begin(), order.end());
  std::swap(order[3], order[9]);
  const auto req = request(2);
  EXPECT_EQ(caap_parallel(f.model, f.src, f.blank, req).scores,
            caap_parallel(f.model, f.src, f.blank, req, 1, order).scores);
  const std::vector<int> bad(16, 0);
  EXPECT_THROW(caap_parallel(f.model, f.src, f.blank, req, 1, bad), Error);
}

TEST(Parallel, IdentityGivesBlankProbability) {
  const Fixture f = planted();
  const AttributionMap m = caap_parallel(f.model, f.blank, f.blank, request(0));
  EXPECT_LE((m.scores.array() - f.blank.probs(0)).abs().maxCoeff(), 1e-6f);
}

TEST(Parallel, ThreadsDoNotChangeBits) {
  const Fixture f = planted();
  EXPECT_EQ(caap_parallel(f.model, f.src, f.blank, request(2), 1).scores,
            caap_parallel(f.model, f.src, f.blank, request(2), 8).scores);
}

TEST(Caap, RejectsBadRequests) {
  const Fixture f = planted();
  EXPECT_THROW(caap_naive(f.model, f.src, f.blank, request(5)), Error);
  EXPECT_THROW(caap_parallel(f.model, f.src, f.blank, request(0, SelectionOp::box(1), {1, 7})), Error);
  const Fixture other = planted(8);
  EXPECT_THROW(caap_parallel(f.model, other.src, f.blank, request(0)), Error);
  EXPECT_THROW(attribute(f.model, Image(8, 8, 3), f.x0, AttributionMode::kParallel, request(0)), Error);
}

TEST(BlankStats, TotalsMatchExponents) {
  const Fixture f = planted();
  const BlankStats s = precompute_blank_stats(f.model, f.blank, {1, 4});
  EXPECT_EQ(s.first_block, 1);
  for (int b = s.first_block; b < f.model.config.layers; ++b) {
    for (const auto& h : s.blocks[static_cast<std::size_t>(b)]) {
      double total = 0.0;
      for (float e : h.e0) {
        EXPECT_GT(e, 0.0f);
        EXPECT_LE(e, 1.0f);
        total += e;
      }
      EXPECT_NEAR(h.z_total, total, 1e-5);
    }
  }
}

TEST(BlankStats, UniformAttentionGivesUnitExponents) {
  Fixture f = planted();
  f.model = oracle::uniform_attention(f.model);
  f.blank = forward_full(f.model, f.x0);
  const BlankStats s = precompute_blank_stats(f.model, f.blank, {1, 4});
  for (int b = 1; b < f.model.config.layers; ++b) {
    for (const auto& h : s.blocks[static_cast<std::size_t>(b)]) {
      for (float e : h.e0) EXPECT_EQ(e, 1.0f);
      EXPECT_EQ(h.z_total, 16.0f);
    }
  }
}

TEST(BlankStats, MeanOfIdenticalValuesIsThatValue) {
  Fixture f = planted();
  for (auto& b : f.model.blocks) {
    b.wv.setZero();
    b.bv = RowVectorF::LinSpaced(f.model.config.dim, -1.0f, 1.0f);
  }
  f.blank = forward_full(f.model, f.x0);
  const BlankStats s = precompute_blank_stats(f.model, f.blank, {1, 4});
  const int dh = f.model.config.head_dim();
  for (int b = 1; b < f.model.config.layers; ++b) {
    for (int h = 0; h < f.model.config.heads; ++h) {
      const RowVectorF expect = f.model.blocks[static_cast<std::size_t>(b)].bv.segment(h * dh, dh);
      EXPECT_LE((s.blocks[static_cast<std::size_t>(b)][static_cast<std::size_t>(h)].v_mean - expect).cwiseAbs().maxCoeff(), 1e-6f);
    }
  }
}

TEST(Approx, CollapsesToNaiveWhenSelectionCoversGrid) {
  for (std::uint64_t seed : {7, 8, 9}) {
    const Fixture f = planted(seed, 9);
    for (const LayerRange r : {LayerRange{1, 4}, LayerRange{2, 6}, LayerRange{1, 1}}) {
      const auto req = request(1, SelectionOp::box(4), r);
      const BlankStats s = precompute_blank_stats(f.model, f.blank, r);
      const AttributionMap a = caap_approx(f.model, f.src, f.blank, s, req);
      const AttributionMap n = caap_naive(f.model, f.src, f.blank, req);
      EXPECT_LE((a.scores - n.scores).cwiseAbs().maxCoeff(), 1e-5f) << "seed " << seed;
    }
  }
}

TEST(Approx, ExactForIdentityUnderUniformAttention) {
  Fixture f = planted();
  f.model = oracle::uniform_attention(f.model);
  f.blank = forward_full(f.model, f.x0);
  const auto req = request(2);
  const BlankStats s = precompute_blank_stats(f.model, f.blank, req.range);
  const AttributionMap a = caap_approx(f.model, f.blank, f.blank, s, req);
  const AttributionMap n = caap_naive(f.model, f.blank, f.blank, req);
  EXPECT_LE((a.scores - n.scores).cwiseAbs().maxCoeff(), 1e-5f);
}

TEST(Approx, RankAgreementWithNaiveIsPinned) {
  const Fixture f = planted();
  const auto req = request(predicted_class(f.src), SelectionOp::box(1), LayerRange::automatic(6));
  const BlankStats s = precompute_blank_stats(f.model, f.blank, req.range);
  const AttributionMap a = caap_approx(f.model, f.src, f.blank, s, req);
  const AttributionMap n = caap_naive(f.model, f.src, f.blank, req);
  const double rho = spearman(std::span<const float>(a.scores.data(), 16), std::span<const float>(n.scores.data(), 16));
  EXPECT_NEAR(rho, 1.0, 0.02);
}

TEST(Approx, RejectsForeignStats) {
  const Fixture f = planted();
  const Fixture other = planted(8);
  const BlankStats foreign = precompute_blank_stats(other.model, other.blank, {1, 4});
  EXPECT_THROW(caap_approx(f.model, f.src, f.blank, foreign, request(0)), Error);
  const BlankStats late = precompute_blank_stats(f.model, f.blank, {3, 4});
  EXPECT_THROW(caap_approx(f.model, f.src, f.blank, late, request(0, SelectionOp::box(1), {1, 4})), Error);
}

TEST(Approx, ThreadsDoNotChangeBits) {
  const Fixture f = planted();
  const BlankStats s = precompute_blank_stats(f.model, f.blank, {1, 4});
  EXPECT_EQ(caap_approx(f.model, f.src, f.blank, s, request(2), 1).scores,
            caap_approx(f.model, f.src, f.blank, s, request(2), 8).scores);
}

TEST(InputInsertion, Boundaries) {
  const Fixture f = planted();
  const AttributionMap same = input_insertion_attr(f.model, f.x0, f.x0, request(2));
  EXPECT_EQ(spread(same), 0.0f);
  EXPECT_EQ(same.scores(0), f.blank.probs(2));
  const AttributionMap full = input_insertion_attr(f.model, f.x, f.x0, request(2, SelectionOp::box(4)));
  EXPECT_EQ(spread(full), 0.0f);
  EXPECT_EQ(full.scores(0), f.src.probs(2));
}

TEST(InputInsertion, PinnedPlantedMap) {
  const Fixture f = planted();
  const AttributionMap m = input_insertion_attr(f.model, f.x, f.x0, request(2, SelectionOp::no_pad()));
  Eigen::Index best;
  m.scores.maxCoeff(&best);
  EXPECT_EQ(best, 5);
  EXPECT_EQ(m.scores(5), f.src.probs(2));
  for (int p = 0; p < 16; ++p) {
    if (p != 5) EXPECT_EQ(m.scores(p), f.blank.probs(2));
  }
  EXPECT_NEAR(m.scores(5), 0.36658508f, 1e-6f);
  EXPECT_NEAR(m.scores(0), 0.36606637f, 1e-6f);
}

TEST(InputDeletion, Boundaries) {
  const Fixture f = planted();
  const AttributionMap same = input_deletion_attr(f.model, f.x0, f.x0, request(2));
  EXPECT_EQ(same.scores, VectorF::Zero(16));
  ModelBundle dead = f.model;
  dead.patch_w.setZero();
  const AttributionMap zero = input_deletion_attr(dead, f.x, f.x0, request(2, SelectionOp::no_pad()));
  EXPECT_EQ(zero.scores, VectorF::Zero(16));
}

TEST(InputDeletion, PinnedPlantedMap) {
  const Fixture f = planted();
  const AttributionMap m = input_deletion_attr(f.model, f.x, f.x0, request(2, SelectionOp::no_pad()));
  Eigen::Index best;
  m.scores.maxCoeff(&best);
  EXPECT_EQ(best, 5);
  EXPECT_NEAR(m.scores(5), 0.00051871f, 1e-7f);
  for (int p = 0; p < 16; ++p) {
    if (p != 5) EXPECT_EQ(m.scores(p), 0.0f);
  }
}

TEST(Attribute, DispatchesEveryMode) {
  const Fixture f = planted();
  const auto req = request(2);
  EXPECT_EQ(attribute(f.model, f.x, f.x0, AttributionMode::kParallel, req).scores,
            caap_parallel(f.model, f.src, f.blank, req).scores);
  EXPECT_EQ(attribute(f.model, f.x, f.x0, AttributionMode::kNaive, req).scores,
            caap_naive(f.model, f.src, f.blank, req).scores);
  EXPECT_EQ(attribute(f.model, f.x, f.x0, AttributionMode::kApprox, req).mode, AttributionMode::kApprox);
  EXPECT_EQ(attribute(f.model, f.x, f.x0, AttributionMode::kInputInsert, req).mode, AttributionMode::kInputInsert);
  EXPECT_EQ(attribute(f.model, f.x, f.x0, AttributionMode::kInputDelete, req).mode, AttributionMode::kInputDelete);
}
