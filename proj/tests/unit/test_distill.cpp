#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "audistill/distill.hpp"
#include "oracles.hpp"
#include "toy_data.hpp"

using namespace audistill;

namespace {

using toy::toy_arch;
using toy::two_blobs;
using toy::toy_buffer;

ParamVector pv(std::vector<float> v) {
  ArchDescriptor a = toy_arch();
  ParamVector p{std::vector<float>(param_count(a), 0.f), a, 0};
  std::copy(v.begin(), v.end(), p.flat.begin());
  return p;
}

}  // namespace

TEST(MttLoss, Anchors) {
  const auto start = pv({3.f, 1.f}), target = pv({1.f, 1.f});
  EXPECT_EQ(mtt_loss(target, start, target), 0.0);
  EXPECT_EQ(mtt_loss(start, start, target), 1.0);
  // end - target = (1, 0), start - target = (2, 0)
  EXPECT_DOUBLE_EQ(mtt_loss(pv({2.f, 1.f}), start, target), 0.25);
}

TEST(MttLoss, JointScalingLeavesLossInvariant) {
  Rng rng(3);
  const std::size_t n = param_count(toy_arch());
  std::vector<float> e(n), s(n), t(n);
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = float(rng.normal());
    s[i] = float(rng.normal());
    t[i] = float(rng.normal());
  }
  const double base = mtt_loss(pv(e), pv(s), pv(t));
  for (float c : {2.f, 0.25f, 8.f}) {
    auto sc = [c](std::vector<float> v) {
      for (auto& x : v) x *= c;
      return v;
    };
    EXPECT_EQ(mtt_loss(pv(sc(e)), pv(sc(s)), pv(sc(t))), base) << "c = " << c;
  }
  auto sc3 = [](std::vector<float> v) {
    for (auto& x : v) x *= 3.f;
    return v;
  };
  EXPECT_NEAR(mtt_loss(pv(sc3(e)), pv(sc3(s)), pv(sc3(t))), base, 1e-6 * base);
}

TEST(MttLoss, StagnantTeacherRejected) {
  const auto p = pv({1.f, 2.f});
  EXPECT_THROW(mtt_loss(p, p, p), StagnantTeacherError);
}

TEST(MttDistill, ZeroIterationsReturnsInit) {
  const auto data = two_blobs(8, 1);
  const auto buf = toy_buffer(data, 1, 6);
  const auto init = init_distilled(data, 2, 1, false, 0.01f, 4);
  MttParams p;
  p.outer_iters = 0;
  p.inner_steps = 2;
  p.target_steps = 2;
  p.max_start = 3;
  const auto out = mtt_distill(buf, init, p, 1);
  EXPECT_EQ(out.features, init.features);
  EXPECT_EQ(out.alpha, init.alpha);
}

TEST(MttDistill, MetaGradientMatchesFiniteDifferences) {
  // Two-layer toy model (conv block + linear head), N = 2 inner steps.
  const auto data = two_blobs(8, 2);
  const auto buf = toy_buffer(data, 1, 5);
  const auto init = init_distilled(data, 2, 1, false, 0.05f, 5);
  MttParams p;
  p.inner_steps = 2;
  p.target_steps = 2;
  p.max_start = 2;
  oracle::Fn<float> f = [&](const std::vector<ad::Tensor>& x) {
    return mtt_objective_at(buf, 0, 1, x[0], init.labels, ad::Tensor::scalar(init.alpha), p);
  };
  EXPECT_LT(oracle::gradcheck<float>(f, {init.tensor()}, 1e-2), 5e-2);
  // alpha as well
  oracle::Fn<float> fa = [&](const std::vector<ad::Tensor>& a) {
    return mtt_objective_at(buf, 0, 1, init.tensor(), init.labels, a[0], p);
  };
  EXPECT_LT(oracle::gradcheck<float>(fa, {ad::Tensor::scalar(init.alpha)}, 1e-3), 5e-2);
}

TEST(MttDistill, ToyBlobsObjectiveDecreases) {
  const auto data = two_blobs(16, 3);
  const auto buf = toy_buffer(data, 2, 8);
  const auto init = init_distilled(data, 2, 1, false, 0.01f, 6);
  MttParams p;
  p.outer_iters = 200;
  p.inner_steps = 5;
  p.target_steps = 3;
  p.max_start = 4;
  p.outer_lr = 1.0;
  p.alpha_lr = 1e-4;
  DistillTrace trace;
  const auto out = mtt_distill(buf, init, p, 7, &trace);
  EXPECT_EQ(trace.loss.size(), 200u);
  EXPECT_LT(mtt_objective(buf, out, p), mtt_objective(buf, init, p));
  EXPECT_EQ(out.labels, init.labels);
  EXPECT_GE(out.alpha, kMinAlpha);
}

TEST(MttDistill, AlphaStaysPositive) {
  const auto data = two_blobs(8, 4);
  const auto buf = toy_buffer(data, 1, 6);
  auto init = init_distilled(data, 2, 2, false, 1e-5f, 8);
  MttParams p;
  p.outer_iters = 5;
  p.inner_steps = 2;
  p.target_steps = 2;
  p.max_start = 3;
  p.outer_lr = 0.0;
  p.alpha_lr = 1e6;  // a single step would drive alpha far negative
  DistillTrace trace;
  const auto out = mtt_distill(buf, init, p, 2, &trace);
  for (double a : trace.alpha) EXPECT_GE(a, kMinAlpha);
  EXPECT_EQ(out.labels, init.labels);
}

TEST(MttDistill, DeterministicPerSeed) {
  const auto data = two_blobs(8, 5);
  const auto buf = toy_buffer(data, 2, 6);
  const auto init = init_distilled(data, 2, 2, false, 0.01f, 9);
  MttParams p;
  p.outer_iters = 10;
  p.inner_steps = 3;
  p.target_steps = 2;
  p.max_start = 3;
  p.batch_size = 2;
  EXPECT_EQ(mtt_distill(buf, init, p, 5).features, mtt_distill(buf, init, p, 5).features);
}

TEST(MttDistill, StagnantStartsAreResampledThenFail) {
  const auto data = two_blobs(4, 6);
  TrajectoryBuffer buf;
  Trajectory flat;
  for (int e = 0; e < 5; ++e) flat.push_back({build(toy_arch(), 1).flat, toy_arch(), e});
  buf.trajectories.push_back(flat);
  MttParams p;
  p.outer_iters = 1;
  p.inner_steps = 1;
  p.target_steps = 1;
  p.max_start = 2;
  p.max_retries = 4;
  EXPECT_THROW(mtt_distill(buf, init_distilled(data, 2, 1, false, 0.01f, 1), p, 1), StagnantTeacherError);
}

TEST(Buffer, IntegrityChecks) {
  const auto data = two_blobs(4, 7);
  auto buf = toy_buffer(data, 2, 3);
  EXPECT_NO_THROW(buf.validate(2, 1));
  EXPECT_THROW(buf.validate(3, 1), BufferIntegrityError);
  ArchDescriptor other = toy_arch();
  other.width = 5;
  buf.trajectories.push_back(train_epochs(build(other, 1), data, 3, 0.05, 4, 1));
  EXPECT_THROW(buf.validate(), BufferIntegrityError);
}

TEST(Dcgm, DistanceAnchors) {
  Rng rng(1);
  const auto g1 = oracle::random_tensor<float>(rng, {5});
  const auto g2 = oracle::random_tensor<float>(rng, {3});
  EXPECT_NEAR(gradient_match_distance({g1, g2}, {g1, g2}).item(), 0.0, 1e-6);
  // Orthogonal layers: 2 per layer.
  const ad::Tensor u({2}, {3.f, 0.f}), v({2}, {0.f, 0.5f});
  const ad::Tensor w({3}, {1.f, 1.f, 0.f}), z({3}, {0.f, 0.f, 2.f});
  EXPECT_NEAR(gradient_match_distance({u, w}, {v, z}).item(), 4.0, 1e-6);
  // A zero layer is skipped.
  EXPECT_NEAR(gradient_match_distance({u, ad::Tensor::zeros({3})}, {v, z}).item(), 2.0, 1e-6);
}

TEST(Dcgm, IdenticalBatchesGiveZeroDistance) {
  const auto data = two_blobs(4, 8);
  const auto a = toy_arch();
  const ad::Tensor th({param_count(a)}, build(a, 2).flat, true);
  std::vector<std::size_t> idx{0, 1, 2};
  const auto g = ad::grad(ad::cross_entropy(forward(a, th, data.batch(idx)), data.batch_labels(idx)), {th})[0];
  EXPECT_NEAR(gradient_match_distance(split_layers(a, g), split_layers(a, g)).item(), 0.0, 1e-6);
}

TEST(Dcgm, DistanceGradientMatchesFiniteDifferences) {
  const auto data = two_blobs(4, 9);
  const auto a = toy_arch();
  const ad::Tensor th({param_count(a)}, build(a, 3).flat, true);
  std::vector<std::size_t> ridx{0, 1, 2, 3};
  const auto g_real =
      ad::grad(ad::cross_entropy(forward(a, th, data.batch(ridx)), data.batch_labels(ridx)), {th})[0];
  oracle::Fn<float> f = [&](const std::vector<ad::Tensor>& x) {
    const auto gs = ad::grad(ad::cross_entropy(forward(a, th, x[0]), {0}), {th}, true)[0];
    return gradient_match_distance(split_layers(a, g_real), split_layers(a, gs));
  };
  std::vector<std::size_t> one{5};
  EXPECT_LT(oracle::gradcheck<float>(f, {data.batch(one)}, 1e-3), 5e-2);
}

TEST(Dcgm, ToyBlobsDriftTowardClassMeans) {
  const auto data = two_blobs(16, 10);
  auto init = init_distilled(data, 2, 1, true, 0.01f, 3);  // noise start
  DcgmParams p;
  p.arch = toy_arch();
  p.iters = 40;
  p.inner_loops = 2;
  p.real_batch = 16;
  p.outer_lr = 0.05;
  const auto out = dcgm_distill(data, init, p, 11);
  auto dist_to_mean = [&](const DistilledSet& d) {
    double total = 0.0;
    for (int c = 0; c < 2; ++c) {
      const auto idx = data.indices_of(c);
      std::vector<double> mean(16, 0.0);
      for (auto i : idx) {
        for (std::size_t j = 0; j < 16; ++j) mean[j] += data.features[i * 16 + j] / double(idx.size());
      }
      for (std::size_t j = 0; j < 16; ++j) {
        const double e = d.features[c * 16 + j] - mean[j];
        total += e * e;
      }
    }
    return total;
  };
  EXPECT_LT(dist_to_mean(out), dist_to_mean(init));
  EXPECT_EQ(out.labels, init.labels);
}

TEST(Coreset, RandomContract) {
  std::vector<int> labels{0, 1, 0, 1, 0, 1, 2, 2, 2};
  const auto a = coreset_random(labels, 3, 2, 5);
  EXPECT_EQ(a, coreset_random(labels, 3, 2, 5));
  ASSERT_EQ(a.size(), 6u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(labels[a[i]], int(i / 2));
  std::set<std::size_t> unique(a.begin(), a.end());
  EXPECT_EQ(unique.size(), 6u);
  auto all = coreset_random(labels, 3, 3, 1);
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_THROW(coreset_random(labels, 3, 4, 1), ParameterError);
}

namespace {

std::vector<std::vector<double>> pts1d(std::vector<double> v) {
  std::vector<std::vector<double>> out;
  for (double x : v) out.push_back({x});
  return out;
}

// Per-step exhaustive oracle: enumerate every unselected candidate at each
// step and keep the one with the smallest mean gap (lowest index on ties).
std::vector<std::size_t> sequential_oracle(const std::vector<std::vector<double>>& p, std::size_t k) {
  const std::size_t dim = p[0].size();
  std::vector<double> mean(dim, 0.0);
  for (const auto& x : p) {
    for (std::size_t d = 0; d < dim; ++d) mean[d] += x[d] / double(p.size());
  }
  std::vector<std::size_t> chosen;
  for (std::size_t j = 1; j <= k; ++j) {
    double best = INFINITY;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      double dist = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        double s = p[i][d];
        for (auto c : chosen) s += p[c][d];
        dist += (mean[d] - s / double(j)) * (mean[d] - s / double(j));
      }
      if (dist < best) {
        best = dist;
        arg = i;
      }
    }
    chosen.push_back(arg);
  }
  return chosen;
}

}  // namespace

TEST(Coreset, HerdingOneDimensionalExample) {
  const auto sel = coreset_herding(pts1d({0, 1, 2, 10}), {0, 0, 0, 0}, 1, 1);
  EXPECT_EQ(sel, std::vector<std::size_t>{2});
}

TEST(Coreset, HerdingWholeClassMatchesMean) {
  const auto p = pts1d({0.5, -1, 4, 2.25, 7});
  auto sel = coreset_herding(p, {0, 0, 0, 0, 0}, 1, 5);
  std::sort(sel.begin(), sel.end());
  EXPECT_EQ(sel, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(Coreset, HerdingCpcOneMatchesExhaustiveSubsets) {
  Rng rng(12);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 3 + rng.below(6);  // two points always tie
    std::vector<std::vector<double>> p(n, std::vector<double>(3));
    for (auto& x : p) {
      for (auto& v : x) v = rng.normal();
    }
    std::vector<double> mean(3, 0.0);
    for (const auto& x : p) {
      for (int d = 0; d < 3; ++d) mean[d] += x[d] / double(n);
    }
    const auto best = oracle::best_subset(n, 1, [&](const std::vector<std::size_t>& s) {
      double e = 0.0;
      for (int d = 0; d < 3; ++d) e += (p[s[0]][d] - mean[d]) * (p[s[0]][d] - mean[d]);
      return e;
    });
    EXPECT_EQ(coreset_herding(p, std::vector<int>(n, 0), 1, 1), best);
  }
}

TEST(Coreset, HerdingMatchesPerStepExhaustiveOracle) {
  Rng rng(13);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 2 + rng.below(7);
    std::vector<std::vector<double>> p(n, std::vector<double>(2));
    for (auto& x : p) {
      for (auto& v : x) v = rng.normal();
    }
    for (std::size_t k = 1; k <= 2; ++k) {
      EXPECT_EQ(coreset_herding(p, std::vector<int>(n, 0), 1, k), sequential_oracle(p, k));
    }
  }
}

TEST(Coreset, HerdingDuplicatedDatasetPicksSameVectors) {
  Rng rng(14);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 3;  // 6 points once duplicated
    std::vector<std::vector<double>> p(n, std::vector<double>(2));
    for (auto& x : p) {
      for (auto& v : x) v = rng.normal();
    }
    auto doubled = p;
    doubled.insert(doubled.end(), p.begin(), p.end());
    const auto once = coreset_herding(p, std::vector<int>(n, 0), 1, 1);
    const auto twice = coreset_herding(doubled, std::vector<int>(2 * n, 0), 1, 1);
    EXPECT_EQ(p[once[0]], doubled[twice[0]]);
  }
}

TEST(Coreset, HerdingRejectsSmallClasses) {
  EXPECT_THROW(coreset_herding(pts1d({1, 2}), {0, 1}, 2, 2), ParameterError);
}

TEST(DistilledFile, RoundTripAndValidation) {
  const auto data = two_blobs(4, 15);
  auto d = init_distilled(data, 2, 2, false, 0.0123f, 1);
  d.method = "mtt";
  d.config = {{"seed", 5}};
  d.stats = FeatureStats{{0.5, 1.0}, {1.0, 2.0}};
  const auto dir = std::filesystem::temp_directory_path() / "audistill_distill_test";
  std::filesystem::create_directories(dir);
  save_distilled(d, dir / "d.bin");
  const auto e = load_distilled(dir / "d.bin");
  EXPECT_EQ(e.features, d.features);
  EXPECT_EQ(e.labels, d.labels);
  EXPECT_EQ(e.alpha, d.alpha);
  EXPECT_EQ(e.item_shape, d.item_shape);
  EXPECT_EQ(e.config, d.config);
  EXPECT_EQ(e.stats->std, d.stats->std);
  EXPECT_EQ(encode_distilled(e), encode_distilled(d));
  auto bytes = encode_distilled(d);
  bytes.pop_back();
  EXPECT_THROW(decode_distilled(bytes), FormatError);
  std::filesystem::remove_all(dir);
}
