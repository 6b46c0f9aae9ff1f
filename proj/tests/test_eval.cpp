#include <gtest/gtest.h>

#include <cmath>

#include "relight/eval.hpp"
#include "relight/scene.hpp"
#include "oracles/eval_reference.hpp"
#include "test_util.hpp"

using namespace relight;

using namespace oracle;

TEST(Homography, NormalizationInverseAndErrors) {
  const Homography H({2, 0, 4, 0, 2, 6, 0, 0, 2});
  EXPECT_EQ(H(2, 2), 1.0);
  EXPECT_EQ(H(0, 2), 2.0);
  Rng rng(1);
  for (int k = 0; k < 20; ++k) {
    const auto R = random_homography(rng, 64, 64);
    const auto I = R * R.inverse();
    for (int i = 0; i < 9; ++i) EXPECT_NEAR(I.data()[i], i % 4 == 0 ? 1.0 : 0.0, 1e-9);
  }
  EXPECT_THROW(Homography({1, 0, 0, 0, 1, 0, 0, 0, 0}), ValidationError);
  EXPECT_THROW(Homography({1, 2, 0, 2, 4, 0, 0, 0, 1}), ValidationError);
  EXPECT_THROW(Homography({NAN, 0, 0, 0, 1, 0, 0, 0, 1}), ValidationError);
  // Points on the line at infinity do not project.
  EXPECT_FALSE(project(Homography({1, 0, 0, 0, 1, 0, 1, 0, 1}), -1.0, 5.0).has_value());
}

TEST(CorrectMask, MatchesBruteForceOn100Instances) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto in = random_instance(rng);
    for (double t : {1.0, 3.0, 5.0}) {
      const auto mask = correct_mask(in.m, in.k1, in.k2, in.H, t);
      ASSERT_EQ(mask.correct.size(), in.m.size());
      std::size_t n = 0;
      for (std::size_t k = 0; k < in.m.size(); ++k) {
        EXPECT_EQ(mask.correct[k], ref_correct(in, in.m.pairs[k], t)) << trial << "/" << k;
        n += ref_correct(in, in.m.pairs[k], t);
      }
      PairData p{"p", in.k1, in.k2, in.m, in.H};
      const double expect = in.m.size() ? static_cast<double>(n) / static_cast<double>(in.m.size()) : 0.0;
      EXPECT_DOUBLE_EQ(match_accuracy(p, t), expect);
    }
  }
}

TEST(CorrectMask, ThresholdIsInclusive) {
  const std::vector<Keypoint> k1{{10, 10, 1}}, k2{{13, 14, 1}};  // distance exactly 5
  MatchSet m;
  m.pairs.push_back({0, 0, 0});
  EXPECT_TRUE(correct_mask(m, k1, k2, Homography(), 5.0).correct[0]);
  EXPECT_FALSE(correct_mask(m, k1, k2, Homography(), 4.999).correct[0]);
  m.pairs.push_back({0, 1, 0});
  EXPECT_THROW(correct_mask(m, k1, k2, Homography(), 5.0), ValidationError);
}

TEST(CorrectMask, PointAtInfinityIsIncorrect) {
  const Homography H({1, 0, 0, 0, 1, 0, 1, 0, 1});
  const std::vector<Keypoint> k1{{-1, 3, 1}, {2, 2, 1}}, k2{{0, 0, 1}};
  MatchSet m;
  m.pairs = {{0, 0, 0}, {1, 0, 0}};
  const auto mask = correct_mask(m, k1, k2, H, 100.0);
  EXPECT_FALSE(mask.correct[0]);
  ASSERT_EQ(mask.at_infinity.size(), 1u);
  EXPECT_EQ(mask.at_infinity[0], 0u);
  EXPECT_TRUE(mask.correct[1]);
}

TEST(Mma, MeanOfPerPairAccuracy) {
  Rng rng(3);
  std::vector<PairData> pairs;
  std::vector<Instance> inst;
  for (int k = 0; k < 100; ++k) {
    inst.push_back(random_instance(rng));
    pairs.push_back({"p" + std::to_string(k), inst.back().k1, inst.back().k2, inst.back().m, inst.back().H});
  }
  const std::vector<double> ts{1, 2, 3, 5, 10};
  const auto curve = mma(pairs, ts);
  ASSERT_EQ(curve.size(), ts.size());
  for (std::size_t j = 0; j < ts.size(); ++j) {
    double s = 0;
    for (const auto& in : inst) {
      if (in.m.size() == 0) continue;
      int c = 0;
      for (const auto& m : in.m.pairs) c += ref_correct(in, m, ts[j]);
      s += static_cast<double>(c) / static_cast<double>(in.m.size());
    }
    EXPECT_NEAR(curve[j], s / 100.0, 1e-12);
    if (j) {
      EXPECT_GE(curve[j], curve[j - 1]);
    }
  }
  EXPECT_THROW(mma({}, ts), ValidationError);
  EXPECT_THROW(mma(pairs, {0.0}), ValidationError);
}

TEST(Mma, PairWithoutMatchesCountsAsZero) {
  PairData empty{"e", {{1, 1, 1}}, {{1, 1, 1}}, {}, Homography()};
  PairData perfect{"p", {{1, 1, 1}}, {{1, 1, 1}}, {}, Homography()};
  perfect.matches.pairs.push_back({0, 0, 0});
  EXPECT_EQ(mma({empty, perfect}, {3.0})[0], 0.5);
}

TEST(MutualNn, MatchesBruteForce) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const int n1 = 1 + static_cast<int>(uniform_index(rng, 30)), n2 = 1 + static_cast<int>(uniform_index(rng, 30));
    Descriptors d1(n1, std::vector<double>(4)), d2(n2, std::vector<double>(4));
    // Coarse values force ties.
    for (auto& r : d1)
      for (auto& v : r) v = static_cast<double>(uniform_index(rng, 3));
    for (auto& r : d2)
      for (auto& v : r) v = static_cast<double>(uniform_index(rng, 3));
    std::vector<std::vector<double>> dist(n1, std::vector<double>(n2));
    for (int a = 0; a < n1; ++a)
      for (int b = 0; b < n2; ++b) {
        double s = 0;
        for (int k = 0; k < 4; ++k) s += (d1[a][k] - d2[b][k]) * (d1[a][k] - d2[b][k]);
        dist[a][b] = std::sqrt(s);
      }
    const auto got = mutual_nn_matches(d1, d2);
    std::set<std::pair<int, int>> gs;
    for (std::size_t k = 0; k < got.size(); ++k) {
      gs.emplace(got.pairs[k].i1, got.pairs[k].i2);
      EXPECT_EQ(got.pairs[k].dist, dist[got.pairs[k].i1][got.pairs[k].i2]);
      if (k) {
        EXPECT_LT(got.pairs[k - 1].i1, got.pairs[k].i1);
      }
    }
    EXPECT_EQ(gs, ref_mutual(dist)) << trial;
  }
  EXPECT_EQ(mutual_nn_matches({}, {{1.0}}).size(), 0u);
  EXPECT_THROW(mutual_nn_matches({{1.0}}, {{1.0, 2.0}}), ShapeError);
}

TEST(PrecisionRecall, MatchesBruteForceOn100Instances) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto in = random_instance(rng);
    const double t = 3.0;
    const auto truth = true_matches(in.k1, in.k2, in.H, t);
    const auto ref = ref_truth(in, t);
    EXPECT_EQ(truth, ref) << trial;
    const auto pr = precision_recall(in.m, correct_mask(in.m, in.k1, in.k2, in.H, t), truth);
    const auto [p, r] = ref_precision_recall(in, t);
    EXPECT_EQ(pr.precision, p);
    EXPECT_EQ(pr.recall, r);
    EXPECT_GE(pr.precision, 0.0);
    EXPECT_LE(pr.recall, 1.0);
  }
}

TEST(PrecisionRecall, EdgeCases) {
  MatchSet none;
  const auto pr = precision_recall(none, CorrectMask{}, {});
  EXPECT_EQ(pr.precision, 0.0);
  EXPECT_EQ(pr.recall, 0.0);
  MatchSet one;
  one.pairs.push_back({0, 0, 0});
  EXPECT_THROW(precision_recall(one, CorrectMask{}, {}), ShapeError);
  // Perfect matcher on an identity pair: both are 1.
  const std::vector<Keypoint> k{{1, 1, 1}, {20, 20, 1}, {40, 5, 1}};
  MatchSet m;
  for (int i = 0; i < 3; ++i) m.pairs.push_back({i, i, 0});
  const auto p = precision_recall(m, correct_mask(m, k, k, Homography(), 1.0), true_matches(k, k, Homography(), 1.0));
  EXPECT_EQ(p.precision, 1.0);
  EXPECT_EQ(p.recall, 1.0);
}

TEST(HomographyScore, TranslationCornerError) {
  Rng rng(6);
  for (int k = 0; k < 50; ++k) {
    const double dx = uniform(rng, -5, 5), dy = uniform(rng, -5, 5);
    const auto s = homography_score(Homography(), Homography::translation(dx, dy), 320, 240, 3.0);
    EXPECT_NEAR(s.mean_corner_error, std::sqrt(dx * dx + dy * dy), 1e-9);
    EXPECT_EQ(s.correct, s.mean_corner_error <= 3.0);
  }
  // Boundary is inclusive.
  EXPECT_TRUE(homography_score(Homography(), Homography::translation(3, 4), 10, 10, 5.0).correct);
  EXPECT_FALSE(homography_score(Homography(), Homography::translation(3, 4.001), 10, 10, 5.0).correct);
  EXPECT_EQ(homography_score(Homography(), Homography(), 10, 10, 1.0).mean_corner_error, 0.0);
}

TEST(HomographyScore, MatchesCornerOracleOn100Instances) {
  Rng rng(7);
  std::vector<HomographyScore> scores;
  int correct = 0;
  for (int k = 0; k < 100; ++k) {
    const auto A = random_homography(rng, 320, 240), B = random_homography(rng, 320, 240, 0.05) * A;
    const double s = 4 * ref_mean_corner_error(A, B, 320, 240);
    const auto got = homography_score(A, B, 320, 240, 3.0);
    EXPECT_NEAR(got.mean_corner_error, s / 4, 1e-9);
    scores.push_back(got);
    correct += s / 4 <= 3.0;
  }
  EXPECT_DOUBLE_EQ(homography_accuracy(scores), correct / 100.0);
  EXPECT_THROW(homography_accuracy({}), ValidationError);
  EXPECT_THROW(homography_score(Homography(), Homography(), 0, 10, 1.0), ValidationError);
  EXPECT_THROW(homography_score(Homography(), Homography(), 10, 10, 0.0), ValidationError);
}

TEST(WarpPair, IdentityTranslationAndJitter) {
  const auto im = shade_scene(generate_scene(1, 48), ProbeSpec{});
  const auto same = warp_pair(im, Homography());
  EXPECT_LE(max_abs_error(same.image, im), 1e-12);
  EXPECT_EQ(same.in_frame, 1.0);
  const auto shifted = warp_pair(im, Homography::translation(3, 2));
  for (int y = 2; y < 48; ++y)
    for (int x = 3; x < 48; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(shifted.image.at(y, x, c), im.at(y - 2, x - 3, c), 1e-12);
  EXPECT_EQ(shifted.image.at(0, 0, 0), 0.0);
  PhotometricJitter j;
  j.seed = 3;
  const auto a = warp_pair(im, Homography(), j), b = warp_pair(im, Homography(), j);
  EXPECT_EQ(a.image, b.image);
  EXPECT_GE(a.gain, 0.8);
  EXPECT_LE(a.gain, 1.2);
  EXPECT_LE(std::abs(a.offset), 0.1);
  EXPECT_NEAR(a.image.at(10, 10, 1), std::clamp(a.gain * im.at(10, 10, 1) + a.offset, 0.0, 1.0), 1e-12);
  EXPECT_THROW(warp_pair(im, Homography::translation(40, 0)), ValidationError);
}

TEST(Baseline, DetectsCornersOfASquareAndMatchesUnderShift) {
  Image im(64, 64);
  for (int y = 20; y < 44; ++y)
    for (int x = 20; x < 44; ++x)
      for (int c = 0; c < 3; ++c) im.at(y, x, c) = 1.0;
  const auto det = baseline_detect_describe(im, 4);
  ASSERT_EQ(det.keypoints.size(), 4u);
  for (const auto& k : det.keypoints) {
    EXPECT_TRUE(std::abs(k.x - 19.5) <= 2.0 || std::abs(k.x - 43.5) <= 2.0) << k.x;
    EXPECT_TRUE(std::abs(k.y - 19.5) <= 2.0 || std::abs(k.y - 43.5) <= 2.0) << k.y;
  }
  for (const auto& d : det.descriptors) {
    double n = 0;
    for (double v : d) n += v * v;
    EXPECT_NEAR(n, 1.0, 1e-12);
    EXPECT_EQ(d.size(), static_cast<std::size_t>(kDescriptorDim));
  }
  const auto H = Homography::translation(4, 3);
  const auto w = warp_pair(im, H);
  const auto det2 = baseline_detect_describe(w.image, 4);
  const auto m = mutual_nn_matches(det.descriptors, det2.descriptors);
  PairData p{"sq", det.keypoints, det2.keypoints, m, H};
  EXPECT_EQ(m.size(), 4u);
  EXPECT_EQ(match_accuracy(p, 1.0), 1.0);
  EXPECT_TRUE(baseline_detect_describe(Image(16, 16), 10).keypoints.empty());
  EXPECT_THROW(baseline_detect_describe(im, -1), ValidationError);
}

TEST(EvalIo, RoundTrips) {
  testutil::TempDir dir("eval_io");
  Rng rng(8);
  const auto in = random_instance(rng);
  save_keypoints(in.k1, dir / "k.csv");
  EXPECT_EQ(load_keypoints(dir / "k.csv"), in.k1);
  MatchSet m = in.m;
  for (auto& p : m.pairs) p.dist = uniform01(rng);
  save_matches(m, dir / "m.csv");
  EXPECT_EQ(load_matches(dir / "m.csv").pairs, m.pairs);
  save_homography(in.H, dir / "h.txt");
  EXPECT_EQ(load_homography(dir / "h.txt").data(), in.H.data());
  Descriptors d(5, std::vector<double>(8));
  for (auto& r : d)
    for (auto& v : r) v = static_cast<float>(uniform(rng, -1, 1));
  save_descriptors(d, dir / "d.bin");
  EXPECT_EQ(load_descriptors(dir / "d.bin"), d);
  save_descriptors(d, dir / "d.csv");
  EXPECT_EQ(load_descriptors(dir / "d.csv"), d);

  // Header line is tolerated; junk rows, wrong widths and truncation are not.
  write_file_bytes(dir / "hdr.csv", "x,y,score\n1,2,3\n", 16);
  EXPECT_EQ(load_keypoints(dir / "hdr.csv").size(), 1u);
  write_file_bytes(dir / "bad.csv", "1,2,3\nfoo\n", 10);
  EXPECT_THROW(load_keypoints(dir / "bad.csv"), FormatError);
  write_file_bytes(dir / "wide.csv", "1,2,3,4\n", 8);
  EXPECT_THROW(load_keypoints(dir / "wide.csv"), FormatError);
  write_file_bytes(dir / "frac.csv", "0.5,1,0\n", 8);
  EXPECT_THROW(load_matches(dir / "frac.csv"), FormatError);
  write_file_bytes(dir / "h8.txt", "1 0 0 0 1 0 0 0\n", 16);
  EXPECT_THROW(load_homography(dir / "h8.txt"), FormatError);
  const auto bytes = read_file_bytes(dir / "d.bin");
  write_file_bytes(dir / "short.bin", bytes.data(), bytes.size() - 4);
  EXPECT_THROW(load_descriptors(dir / "short.bin"), FormatError);
  EXPECT_THROW(load_keypoints(dir / "missing.csv"), IoError);
}

TEST(RunEval, AllModesOnSyntheticPairs) {
  testutil::TempDir dir("run_eval");
  PairsManifest pm;
  pm.base_dir = dir.path();
  Rng rng(9);
  std::vector<Instance> inst;
  for (int k = 0; k < 4; ++k) {
    const auto in = random_instance(rng);
    inst.push_back(in);
    const std::string s = std::to_string(k);
    save_keypoints(in.k1, dir / ("k1_" + s + ".csv"));
    save_keypoints(in.k2, dir / ("k2_" + s + ".csv"));
    save_matches(in.m, dir / ("m_" + s + ".csv"));
    save_homography(in.H, dir / ("h_" + s + ".txt"));
    save_homography(Homography::translation(k, 0) * in.H, dir / ("he_" + s + ".txt"));
    PairEntry e;
    e.name = "pair" + s;
    e.keypoints1 = "k1_" + s + ".csv";
    e.keypoints2 = "k2_" + s + ".csv";
    e.matches = "m_" + s + ".csv";
    e.homography = "h_" + s + ".txt";
    e.homography_est = "he_" + s + ".txt";
    e.width = 200;
    e.height = 150;
    pm.pairs.push_back(e);
  }
  save_pairs_manifest(pm, dir / "pairs.json");
  const auto m = load_pairs_manifest(dir / "pairs.json");
  ASSERT_EQ(m.pairs.size(), 4u);

  EvalConfig cfg;
  cfg.corner_eps = 1.5;
  const auto r = run_eval(EvalMode::Mma, m, cfg);
  double s = 0;
  for (const auto& in : inst) {
    int c = 0;
    for (const auto& mm : in.m.pairs) c += ref_correct(in, mm, 3.0);
    s += in.m.size() ? static_cast<double>(c) / in.m.size() : 0.0;
  }
  EXPECT_NEAR(r["aggregate"]["mma"].get<double>(), s / 4, 1e-12);
  EXPECT_EQ(r["per_pair"].size(), 4u);
  EXPECT_EQ(r["aggregate"]["curve"].size(), 10u);

  const auto h = run_eval(EvalMode::Homography, m, cfg);
  // Shift k px in x: errors 0, 1, 2, 3; eps 1.5 accepts the first two.
  EXPECT_NEAR(h["aggregate"]["mean_corner_error"].get<double>(), 1.5, 1e-9);
  EXPECT_DOUBLE_EQ(h["aggregate"]["accuracy"].get<double>(), 0.5);

  const auto pr = run_eval(EvalMode::PrecisionRecall, m, cfg);
  EXPECT_EQ(pr["config"]["mode"], "pr");
  EXPECT_GE(pr["aggregate"]["precision"].get<double>(), 0.0);

  EXPECT_EQ(parse_eval_mode("homography"), EvalMode::Homography);
  EXPECT_THROW(parse_eval_mode("auc"), ValidationError);
  EXPECT_THROW(run_eval(EvalMode::Mma, PairsManifest{}, cfg), ValidationError);
  write_file_bytes(dir / "bad.json", "{\"pairs\":[{\"keypoints1\":\"a\",\"keypoints2\":\"b\",\"homography\":\"h\"}]}", 71);
  EXPECT_THROW(load_pairs_manifest(dir / "bad.json"), FormatError);
}

TEST(RunEval, DescriptorPairsUseMutualNn) {
  testutil::TempDir dir("run_eval_desc");
  const auto im = shade_scene(generate_scene(3, 96), ProbeSpec{});
  const auto H = Homography::translation(2, 1);
  const auto w = warp_pair(im, H);
  const auto a = baseline_detect_describe(im, 50), b = baseline_detect_describe(w.image, 50);
  save_keypoints(a.keypoints, dir / "k1.csv");
  save_keypoints(b.keypoints, dir / "k2.csv");
  save_descriptors(a.descriptors, dir / "d1.bin");
  save_descriptors(b.descriptors, dir / "d2.bin");
  save_homography(H, dir / "h.txt");
  PairsManifest pm;
  PairEntry e{"p", "k1.csv", "k2.csv", "d1.bin", "d2.bin", "", "h.txt", "", 96, 96};
  pm.pairs.push_back(e);
  save_pairs_manifest(pm, dir / "pairs.json");
  const auto m = load_pairs_manifest(dir / "pairs.json");
  const auto loaded = load_pair(m, m.pairs[0]);
  // Descriptors are stored as f32, so compare indices only.
  const auto direct = mutual_nn_matches(a.descriptors, b.descriptors);
  ASSERT_EQ(loaded.matches.size(), direct.size());
  for (std::size_t k = 0; k < direct.size(); ++k) {
    EXPECT_EQ(loaded.matches.pairs[k].i1, direct.pairs[k].i1);
    EXPECT_EQ(loaded.matches.pairs[k].i2, direct.pairs[k].i2);
  }
  const auto r = run_eval(EvalMode::Mma, m, EvalConfig{});
  EXPECT_GT(r["aggregate"]["mma"].get<double>(), 0.5);
  EXPECT_THROW(run_eval(EvalMode::Homography, m, EvalConfig{}), FormatError);
}
