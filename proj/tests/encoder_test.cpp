#include <cmath>
#include <filesystem>
#include <numeric>

#include "cvgl/encoder/augment.hpp"
#include "cvgl/encoder/embedding.hpp"
#include "cvgl/encoder/loss.hpp"
#include "cvgl/encoder/model.hpp"
#include "cvgl/encoder/train.hpp"
#include "cvgl/synth/world.hpp"
#include "gradient_oracle.hpp"
#include "gtest/gtest.h"

namespace cvgl {
namespace {

LossConfig Plain(double tau = 1.0, double eps = 0.0) {
  LossConfig c;
  c.log_inv_temperature = -std::log(tau);
  c.label_smoothing = eps;
  return c;
}

Matrix Rows(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

ImageBuffer RandomImage(std::size_t w, std::size_t h, std::size_t ch, std::uint64_t seed) {
  Rng rng(seed);
  ImageBuffer img(w, h, ch);
  for (float& v : img.data()) v = static_cast<float>(rng.uniform());
  return img;
}

TEST(InfoNce, TwoReferenceHandValue) {
  const EmbeddingMatrix refs(Rows({{1, 0}, {0, 1}}));
  const std::vector<double> q{1, 0};
  EXPECT_NEAR(infonce(q, refs, 0, Plain()), std::log(1 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(infonce(q, refs, 0, Plain()), 0.31326, 1e-4);
}

TEST(InfoNce, UniformLogitsGiveLogN) {
  for (std::size_t n : {2u, 5u, 17u}) {
    Matrix r = Matrix::Zero(static_cast<Eigen::Index>(n), 3);
    r.col(0).setOnes();
    std::vector<std::uint64_t> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    const EmbeddingMatrix refs(r, ids);
    const std::vector<double> q{0, 1, 0};
    for (double tau : {0.07, 1.0, 3.0}) EXPECT_NEAR(infonce(q, refs, n - 1, Plain(tau)), std::log(n), 1e-12);
  }
}

TEST(InfoNce, SmoothedHandValue) {
  const EmbeddingMatrix refs(Rows({{1, 0}, {0, 1}}));
  const std::vector<double> q{1, 0};
  const double expected = 0.9 * std::log(1 + std::exp(-1.0)) + 0.1 * std::log(1 + std::exp(1.0));
  EXPECT_NEAR(infonce(q, refs, 0, Plain(1.0, 0.1)), expected, 1e-12);
  EXPECT_NEAR(infonce(q, refs, 0, Plain(1.0, 0.1)), 0.4132, 1e-4);
}

TEST(InfoNce, Contracts) {
  const EmbeddingMatrix one(Rows({{1, 0}}));
  const std::vector<double> q{1, 0};
  EXPECT_THROW(infonce(q, one, 0, Plain()), ContractError);
  const EmbeddingMatrix two(Rows({{1, 0}, {0, 1}}));
  EXPECT_THROW(infonce(q, two, 2, Plain()), ContractError);
  EXPECT_THROW(infonce(q, two, 0, Plain(1.0, 0.5)), ConfigError);
}

TEST(SymmetricInfoNce, OrthonormalIdentityPairing) {
  const EmbeddingMatrix g(Rows({{1, 0, 0}, {0, 1, 0}}));
  EXPECT_NEAR(symmetric_infonce(g, g, identity_pairing(2), Plain()), 0.31326, 1e-4);
}

TEST(SymmetricInfoNce, IdenticalRowsGiveLogN) {
  Matrix r = Matrix::Zero(6, 4);
  r.col(2).setOnes();
  const EmbeddingMatrix g(r);
  EXPECT_NEAR(symmetric_infonce(g, g, identity_pairing(6), Plain(0.3)), std::log(6.0), 1e-12);
}

TEST(SymmetricInfoNce, SwappingSidesLeavesLossUnchanged) {
  Rng rng(3);
  Matrix a(5, 4), b(5, 4);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a.data()[i] = rng.normal();
    b.data()[i] = rng.normal();
  }
  const EmbeddingMatrix g(normalize_rows(a)), s(normalize_rows(b));
  std::vector<std::size_t> p{2, 0, 4, 1, 3}, inv(5);
  for (std::size_t i = 0; i < 5; ++i) inv[p[i]] = i;
  const auto cfg = Plain(0.5, 0.1);
  EXPECT_NEAR(symmetric_infonce(g, s, p, cfg), symmetric_infonce(s, g, inv, cfg), 1e-12);
}

TEST(SymmetricInfoNce, Contracts) {
  const EmbeddingMatrix g(Rows({{1, 0}, {0, 1}}));
  const EmbeddingMatrix s3(Rows({{1, 0}, {0, 1}, {1, 0}}), {0, 1, 2});
  EXPECT_THROW(symmetric_infonce(g, s3, identity_pairing(2), Plain()), ContractError);
  const std::vector<std::size_t> not_bijection{0, 0};
  EXPECT_THROW(symmetric_infonce(g, g, not_bijection, Plain()), ContractError);
}

TEST(SymmetricInfoNce, SmoothedInfimumIsTargetEntropy) {
  // Orthogonal rows with 1/tau = ln 9 put softmax exactly on the smoothed
  // target (0.9, 0.1), so the loss equals the target entropy.
  const EmbeddingMatrix g(Rows({{1, 0}, {0, 1}}));
  LossConfig c;
  c.label_smoothing = 0.1;
  c.log_inv_temperature = std::log(std::log(9.0));
  const double entropy = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  EXPECT_NEAR(symmetric_infonce(g, g, identity_pairing(2), c), entropy, 1e-12);
  c.log_inv_temperature += 0.3;
  EXPECT_GT(symmetric_infonce(g, g, identity_pairing(2), c), entropy);
}

// ---------------------------------------------------------------------------

TEST(Embed, UnitNormAndDeterministic) {
  const auto m = EncoderModel::initialized(TowerId::ground, TowerSpec{}, 5);
  const auto img = RandomImage(64, 32, 3, 9);
  const auto e1 = embed(img, m);
  EXPECT_NEAR(e1.norm(), 1.0, 1e-6);
  EXPECT_EQ(e1.size(), 128);
  EXPECT_TRUE(e1 == embed(img, m));
}

TEST(Embed, IdentityWeightPooling) {
  TowerSpec spec;
  spec.grid_rows = 2;
  spec.grid_cols = 2;
  spec.channels = 1;
  spec.widths = {4};
  EncoderModel m(TowerId::overhead, spec);
  for (double& g : m.gates()) g = 1.0;
  m.weight(0).setIdentity();

  EXPECT_TRUE(embed(ImageBuffer(6, 4, 1, 0.3f), m).isApprox(Eigen::VectorXd::Constant(4, 0.5), 1e-12));

  // Quadrant means of a 4x4 image: 0.1, 0.2 (top), 0.3, 0.4 (bottom) all
  // offset by a checker of +-0.05 that averages out within a quadrant.
  ImageBuffer img(4, 4, 1);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      img.at(x, y, 0) = static_cast<float>(0.1 * (1 + (x / 2) + 2 * (y / 2)) + ((x + y) % 2 ? 0.05 : -0.05));
  Eigen::VectorXd expect(4);
  expect << 0.1, 0.2, 0.3, 0.4;
  expect /= std::sqrt(0.01 + 0.04 + 0.09 + 0.16);
  EXPECT_TRUE(embed(img, m).isApprox(expect, 1e-6));
}

TEST(Embed, ZeroEmbeddingIsNumericError) {
  TowerSpec spec;
  spec.grid_rows = 1;
  spec.grid_cols = 1;
  spec.widths = {2};
  EncoderModel m(TowerId::ground, spec);
  EXPECT_THROW(embed(ImageBuffer(2, 2, 3, 0.5f), m), NumericError);
}

TEST(Embed, EmbedAllMatchesSingleImagePath) {
  const auto m = EncoderModel::initialized(TowerId::overhead, TowerSpec{}, 2);
  std::vector<ImageBuffer> imgs;
  for (int i = 0; i < 70; ++i) imgs.push_back(RandomImage(32, 32, 3, 100 + i));
  std::vector<const ImageBuffer*> ptrs;
  for (auto& i : imgs) ptrs.push_back(&i);
  const auto all = embed_all(ptrs, m);
  ASSERT_EQ(all.n(), 70u);
  for (std::size_t i : {0u, 63u, 64u, 69u}) {
    const auto e = embed(imgs[i], m);
    for (std::size_t j = 0; j < all.d(); ++j) EXPECT_NEAR(all.row(i)[j], e(static_cast<Eigen::Index>(j)), 1e-12);
  }
}

TEST(EmbeddingMatrix, RejectsBadRowsAndIds) {
  EXPECT_THROW(EmbeddingMatrix(Rows({{1, 1}})), ContractError);
  EXPECT_THROW(EmbeddingMatrix(Rows({{1, 0}, {0, 1}}), {4, 4}), ContractError);
}

TEST(EmbeddingMatrix, CvebRoundTripAndLayout) {
  const EmbeddingMatrix e(Rows({{0.6, 0.8}, {1, 0}, {0, -1}}), {10, 3, 7});
  const auto bytes = encode_cveb(e);
  ASSERT_EQ(bytes.size(), 4 + 4 + 8 + 8 + 3 * 2 * 4 + 3 * 8u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CVEB");
  io::ByteReader r(bytes, "mem");
  const auto back = decode_cveb(r);
  EXPECT_EQ(back.ids(), e.ids());
  EXPECT_NEAR(back.rows()(0, 0), 0.6, 1e-7);

  auto truncated = bytes;
  truncated.pop_back();
  io::ByteReader t(truncated, "mem");
  EXPECT_THROW(decode_cveb(t), ContractError);
}

// ---------------------------------------------------------------------------

TEST(Augment, IdentityConfigReturnsInput) {
  const auto img = RandomImage(20, 10, 3, 4);
  EXPECT_EQ(augment(img, AugmentationConfig{}, 77), img);
}

TEST(Augment, FlipIsAnInvolution) {
  const auto img = RandomImage(9, 5, 3, 5);
  AugmentationConfig c;
  c.flip_prob = 1.0;
  const auto once = augment(img, c, 1);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 9; ++x)
      for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(once.at(x, y, k), img.at(8 - x, y, k));
  EXPECT_EQ(augment(once, c, 2), img);
}

TEST(Augment, FullConfigIsDeterministicInDraw) {
  const auto img = RandomImage(32, 32, 3, 6);
  AugmentationConfig c{0.5, 0.6, 0.9, 0.1, 0.2, 0.3, 0.2, 42};
  EXPECT_EQ(augment(img, c, 5), augment(img, c, 5));
  bool differs = false;
  for (std::uint64_t d = 0; d < 8 && !differs; ++d) differs = !(augment(img, c, d) == augment(img, c, 5));
  EXPECT_TRUE(differs);
  const auto out = augment(img, c, 5);
  for (float v : out.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Augment, ValidatesConfig) {
  const auto img = RandomImage(4, 4, 1, 1);
  AugmentationConfig c;
  c.crop_min = 0.4;
  EXPECT_THROW(augment(img, c, 0), ConfigError);
  c = {};
  c.flip_prob = 1.5;
  EXPECT_THROW(augment(img, c, 0), ConfigError);
}

// ---------------------------------------------------------------------------

TEST(LossGradient, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 6; ++seed)
    for (double eps : {0.0, 0.1})
      for (bool sym : {true, false}) {
        auto [m, terms] = testing::random_instance(seed, eps, sym);
        const auto check = testing::finite_difference_check(m, terms);
        EXPECT_LT(check.max_rel_error, 1e-4) << "seed " << seed << " eps " << eps << ": " << check.worst;
        EXPECT_EQ(check.checked, m.ground.parameter_count() + m.overhead.parameter_count() + 1);
      }
}

TEST(LossGradient, VanishesAtConstructedMinimum) {
  TowerSpec spec;
  spec.grid_rows = 1;
  spec.grid_cols = 1;
  spec.widths = {3};
  TwoTower m;
  m.ground = EncoderModel(TowerId::ground, spec);
  m.overhead = EncoderModel(TowerId::overhead, spec);
  for (EncoderModel* t : {&m.ground, &m.overhead}) {
    t->gates()[0] = 1.0;
    t->weight(0).setIdentity();
  }
  m.loss.label_smoothing = 0.1;
  m.loss.log_inv_temperature = std::log(std::log(9.0));
  const Matrix x = Rows({{1, 0, 0}, {0, 1, 0}});
  const std::vector<LossTerm> terms{{TowerId::ground, x, TowerId::overhead, x, pairs_from_bijection(identity_pairing(2)), 1.0}};
  EXPECT_LT(loss_gradient(m, terms).grad.norm(), 1e-6);
}

TEST(LossGradient, ContinuousInSmoothing) {
  auto [m, terms] = testing::random_instance(21, 0.1, true);
  const auto at = [&](double eps) {
    m.loss.label_smoothing = eps;
    return loss_gradient(m, terms).grad;
  };
  const auto lo = at(0.1 - 1e-6), mid = at(0.1), hi = at(0.1 + 1e-6);
  // The gradient is linear in eps, so the two one-sided slopes agree and
  // stay bounded.
  for (std::size_t i = 0; i < mid.ground.size(); ++i) {
    EXPECT_LT(std::abs(hi.ground[i] - lo.ground[i]), 1e-4);
    EXPECT_NEAR(hi.ground[i] - mid.ground[i], mid.ground[i] - lo.ground[i], 1e-9);
  }
  EXPECT_NEAR(hi.log_inv_temperature - mid.log_inv_temperature, mid.log_inv_temperature - lo.log_inv_temperature,
              1e-9);
}

TEST(LossGradient, RejectsTinyBatches) {
  auto [m, terms] = testing::random_instance(1, 0.1, true);
  terms[0].query_features.conservativeResize(1, Eigen::NoChange);
  terms[0].pairs = {{0, 0}};
  EXPECT_THROW(loss_gradient(m, terms), ContractError);
}

TEST(LossGradient, WeightZeroTermContributesNothing) {
  auto [m, terms] = testing::random_instance(2, 0.1, true);
  auto base = terms;
  base.pop_back();
  terms.back().weight = 0.0;
  const auto a = loss_gradient(m, terms), b = loss_gradient(m, base);
  EXPECT_DOUBLE_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grad.overhead, b.grad.overhead);
}

// ---------------------------------------------------------------------------

TEST(AdamW, ZeroGradientZeroDecayIsIdentity) {
  auto [m, terms] = testing::random_instance(3, 0.1, true);
  const TwoTower before = m;
  OptimizerState st;
  optimizer_step(m, Gradients::zeros_like(m), st, 1e-2, 0.0);
  for (std::size_t i = 0; i < m.ground.parameter_count(); ++i)
    EXPECT_EQ(m.ground.params()[i], static_cast<double>(static_cast<float>(before.ground.params()[i])));
}

TEST(AdamW, ZeroGradientDecaysOnlyWeights) {
  auto model = EncoderModel::initialized(TowerId::ground, TowerSpec{2, 2, 3, {4, 3}}, 4);
  for (double& b : model.params().subspan(model.params().size() - 3)) b = 0.25;
  std::vector<double> params(model.params().begin(), model.params().end());
  const std::vector<double> before = params;
  AdamMoments mom;
  const std::vector<double> zero(params.size(), 0.0);
  const double lr = 0.1, wd = 0.5;
  adamw_update(params, zero, mom, 1, lr, wd, model.weight_mask());
  const auto mask = model.weight_mask();
  for (std::size_t i = 0; i < params.size(); ++i)
    EXPECT_DOUBLE_EQ(params[i], mask[i] ? before[i] * (1 - lr * wd) : before[i]);
}

TEST(AdamW, ConstantGradientScalarTrace) {
  // With constant g the bias-corrected moments are exactly g and g^2, so each
  // step is x <- x (1 - lr wd) - lr g / (|g| + eps).
  const double g = -0.37, lr = 0.01, wd = 0.2, eps = 1e-8;
  std::vector<double> x{1.5};
  AdamMoments mom;
  double ref = 1.5;
  for (std::size_t t = 1; t <= 3; ++t) {
    adamw_update(x, std::vector<double>{g}, mom, t, lr, wd, {});
    ref = ref * (1 - lr * wd) - lr * g / (std::abs(g) + eps);
    EXPECT_NEAR(x[0], ref, 1e-12) << "step " << t;
  }
}

TEST(AdamW, NonFiniteUpdateIsNumericError) {
  std::vector<double> x{1.0};
  AdamMoments mom;
  EXPECT_THROW(adamw_update(x, std::vector<double>{std::nan("")}, mom, 1, 0.1, 0.0, {}), NumericError);
}

TEST(Training, LossDecreasesOnSeparableBatch) {
  const auto params = ProjectionParams::make(32, 32, 0.7854);
  synth::TextureConfig tex;
  const auto world = synth::generate_world(13, 16, params, tex);
  std::vector<const ImageBuffer*> imgs;
  for (const auto& s : world.scenes) imgs.push_back(&s.overhead);
  TowerSpec spec;
  TwoTower m = TwoTower::initialized(spec, spec, LossConfig{}, 8);
  const Matrix x = m.overhead.pool(imgs);
  AugmentationConfig aug{0.0, 0.7, 1.0, 0.05, 0.1, 0.1, 0.0, 3};
  OptimizerState st;
  std::vector<double> curve;
  for (int step = 0; step < 50; ++step) {
    std::vector<ImageBuffer> views;
    for (std::size_t i = 0; i < imgs.size(); ++i) views.push_back(augment(*imgs[i], aug, derive_seed(step, i)));
    std::vector<const ImageBuffer*> vp;
    for (auto& v : views) vp.push_back(&v);
    const std::vector<LossTerm> terms{{TowerId::ground, x, TowerId::overhead, m.overhead.pool(vp),
                                       pairs_from_bijection(identity_pairing(16)), 1.0}};
    const auto value = loss_gradient(m, terms);
    curve.push_back(value.loss);
    optimizer_step(m, value.grad, st, 3e-3, 1e-4);
  }
  std::vector<double> smooth;
  for (std::size_t i = 0; i + 5 <= curve.size(); ++i)
    smooth.push_back(std::accumulate(curve.begin() + i, curve.begin() + i + 5, 0.0) / 5);
  for (std::size_t i = 1; i < smooth.size(); ++i) EXPECT_LE(smooth[i], smooth[i - 1]) << "window " << i;
  EXPECT_LT(curve.back(), 0.5 * curve.front());
}

TEST(Checkpoint, CvmdRoundTripIsLossless) {
  auto [m, terms] = testing::random_instance(4, 0.1, false);
  m.ground.round_to_float();
  m.overhead.round_to_float();
  m.loss.log_inv_temperature = static_cast<float>(m.loss.log_inv_temperature);
  const auto bytes = encode_cvmd(m);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CVMD");
  io::ByteReader r(bytes, "mem");
  const TwoTower back = decode_cvmd(r);
  EXPECT_TRUE(same_parameters(m, back));
  EXPECT_EQ(back.ground.spec(), m.ground.spec());
  EXPECT_FLOAT_EQ(static_cast<float>(back.loss.label_smoothing), 0.1f);
  EXPECT_FALSE(back.loss.symmetric);
  EXPECT_EQ(encode_cvmd(back), bytes);

  auto bad = bytes;
  bad[4] = 9;
  io::ByteReader rb(bad, "mem");
  EXPECT_THROW(decode_cvmd(rb), ContractError);
}

}  // namespace
}  // namespace cvgl
