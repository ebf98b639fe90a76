#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "morphtrack/morphnet.hpp"
#include "morphtrack/warp.hpp"
#include "test_util.hpp"

using namespace morphtrack;

namespace {

NetConfig toy_config() {
  NetConfig cfg;
  cfg.h = 48;
  cfg.w = 48;
  cfg.d = 8;
  cfg.stem_channels = 4;
  cfg.feature_channels = 16;
  return cfg;
}

NetConfig tiny_config() {
  NetConfig cfg;
  cfg.h = 16;
  cfg.w = 16;
  cfg.d = 4;
  cfg.stem_channels = 4;
  cfg.feature_channels = 8;
  return cfg;
}

}  // namespace

TEST_CASE("s3dconv preserves the channel count for C in {8,16,64}") {
  Rng rng(1);
  for (int c : {8, 16, 64}) {
    S3DConv s = make_s3dconv(c, 1e-5, rng);
    Tensor x = mt_test::random_tensor({c, 6, 6, 4}, rng, 0.5);
    Tensor y = s.forward(x);
    CHECK(y.shape() == Shape{c, 6, 6, 4});
  }
  CHECK_THROWS_AS(make_s3dconv(6, 1e-5, rng), std::invalid_argument);
}

TEST_CASE("s3dconv with zeroed filters yields zero output") {
  Rng rng(2);
  S3DConv s = make_s3dconv(8, 1e-5, rng);
  for (Tensor w : {s.conv.w_ip, s.conv.w_ef, s.conv.w_cr})
    for (double& v : w.mutable_data()) v = 0.0;
  Tensor x = mt_test::random_tensor({8, 5, 5, 3}, rng);
  Tensor y = s.forward(x);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("an in-plane 3x3x1 filter equals a per-B-scan 2D convolution") {
  Rng rng(3);
  // A volume constant along depth, convolved by a single 3x3x1 filter, must
  // equal the 2D convolution applied to each B-scan independently.
  const int h = 6, w = 5, d = 4;
  Tensor slice2d = mt_test::random_tensor({1, h, w, 1}, rng);
  std::vector<double> rep(static_cast<std::size_t>(h) * w * d);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < d; ++k)
        rep[(static_cast<std::size_t>(i) * w + j) * d + k] =
            slice2d.data()[(static_cast<std::size_t>(i) * w + j)];
  Tensor vol = Tensor::from_data({1, h, w, d}, std::move(rep));
  Tensor kernel = mt_test::random_tensor({1, 1, 3, 3, 1}, rng);

  Tensor out3d = conv3d(vol, kernel, Tensor());
  Tensor out2d = conv3d(slice2d, kernel, Tensor());
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < d; ++k)
        CHECK(out3d.data()[(static_cast<std::size_t>(i) * w + j) * d + k] ==
              doctest::Approx(
                  out2d.data()[static_cast<std::size_t>(i) * w + j])
                  .epsilon(1e-12));
}

TEST_CASE("encoder block doubles channels, keeps space, and is concat-skip") {
  Rng rng(4);
  EncoderBlock block = make_encoder_block(8, 1e-5, rng);
  Tensor x = mt_test::random_tensor({8, 6, 6, 4}, rng, 0.5);
  Tensor y = block.forward(x);
  REQUIRE(y.shape() == Shape{16, 6, 6, 4});
  // First C channels are the raw input (pure concatenation skip).
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("encoder output grids match the stride schedule") {
  Rng rng(5);
  SUBCASE("toy scale 48x48x8, 16 channels per subspace") {
    Encoder enc = make_encoder(toy_config(), rng);
    Tensor vol = mt_test::random_tensor({1, 48, 48, 8}, rng, 0.3);
    FeatureMap f = enc.forward(vol);
    CHECK(f.fd.shape() == Shape{16, 3, 3, 4});
    CHECK(f.fa.shape() == Shape{16, 3, 3, 4});
    CHECK(concat({f.fd, f.fa}).shape() == Shape{32, 3, 3, 4});
  }
  SUBCASE("feature grid arithmetic") {
    NetConfig cfg = toy_config();
    const auto g = cfg.feature_grid();
    CHECK(g[0] == 3);
    CHECK(g[1] == 3);
    CHECK(g[2] == 4);
  }
  SUBCASE("invalid shapes are rejected") {
    NetConfig bad = toy_config();
    bad.h = 40;  // not divisible by 16
    CHECK_THROWS_AS(make_encoder(bad, rng), std::invalid_argument);
    NetConfig bad_d = toy_config();
    bad_d.d = 7;
    CHECK_THROWS_AS(make_encoder(bad_d, rng), std::invalid_argument);
  }
}

TEST_CASE("encoder forward is pure: identical inputs give identical features") {
  Rng rng(6);
  Encoder enc = make_encoder(tiny_config(), rng);
  Tensor vol = mt_test::random_tensor({1, 16, 16, 4}, rng, 0.3);
  FeatureMap f1 = enc.forward(vol);
  FeatureMap f2 = enc.forward(vol);
  for (std::size_t i = 0; i < f1.fd.numel(); ++i)
    CHECK(f1.fd.data()[i] == f2.fd.data()[i]);
  for (std::size_t i = 0; i < f1.fa.numel(); ++i)
    CHECK(f1.fa.data()[i] == f2.fa.data()[i]);
}

TEST_CASE("decoder: zero displacement bypasses to a zero field") {
  Rng rng(7);
  NetConfig cfg = tiny_config();
  DecoderNet dec = make_decoder(cfg, 3, rng);
  DecoderScales scales = make_decoder_scales();
  Tensor v = Tensor::zeros({cfg.feature_channels, 1, 1, 2});
  Tensor field = decoder_forward(dec, v, scales.gamma_dir_d, scales.alpha_mag_d);
  CHECK(field.shape() == Shape{3, 16, 16, 4});
  for (double x : field.data()) CHECK(x == 0.0);
}

TEST_CASE("decoder magnitude law: ||field|| = alpha * ||V|| to 1e-9") {
  Rng rng(8);
  NetConfig cfg = tiny_config();
  DecoderNet dec = make_decoder(cfg, 3, rng);
  DecoderScales scales = make_decoder_scales();
  const double alpha = softplus(scales.alpha_mag_d).value();
  for (int rep = 0; rep < 20; ++rep) {
    Tensor v = mt_test::random_tensor({cfg.feature_channels, 1, 1, 2}, rng,
                                      rng.uniform(0.1, 4.0));
    Tensor field =
        decoder_forward(dec, v, scales.gamma_dir_d, scales.alpha_mag_d);
    const double vn = l2_norm(v).value();
    const double fn = l2_norm(field).value();
    CHECK(std::fabs(fn - alpha * vn) <= 1e-9 * std::max(1.0, alpha * vn));
  }
}

TEST_CASE("decoder direction law: positive rescaling of V leaves the direction") {
  Rng rng(9);
  NetConfig cfg = tiny_config();
  DecoderNet dec = make_decoder(cfg, 1, rng);
  DecoderScales scales = make_decoder_scales();
  for (int rep = 0; rep < 20; ++rep) {
    Tensor v = mt_test::random_tensor({cfg.feature_channels, 1, 1, 2}, rng);
    const double c = rng.uniform(0.05, 20.0);
    Tensor v_scaled = mul_scalar(v, c);
    Tensor f1 = decoder_forward(dec, v, scales.gamma_dir_a, scales.alpha_mag_a);
    Tensor f2 =
        decoder_forward(dec, v_scaled, scales.gamma_dir_a, scales.alpha_mag_a);
    const double n1 = l2_norm(f1).value();
    const double n2 = l2_norm(f2).value();
    REQUIRE(n1 > 0.0);
    for (std::size_t i = 0; i < f1.numel(); ++i) {
      const double d1 = f1.data()[i] / n1;
      const double d2 = f2.data()[i] / n2;
      CHECK(std::fabs(d1 - d2) < 1e-9);
    }
  }
}

TEST_CASE("decoder shape trajectory matches the toy schedule") {
  Rng rng(10);
  NetConfig cfg = toy_config();
  DecoderNet dec = make_decoder(cfg, 3, rng);
  DecoderScales scales = make_decoder_scales();
  Tensor v = mt_test::random_tensor({16, 3, 3, 4}, rng);
  Tensor field = decoder_forward(dec, v, scales.gamma_dir_d, scales.alpha_mag_d);
  CHECK(field.shape() == Shape{3, 48, 48, 8});
}

TEST_CASE("morph_predict: identical inputs give the identity morph") {
  Rng rng(11);
  MorphModel model = make_morph_model(tiny_config(), rng);
  Tensor vol = mt_test::random_tensor({1, 16, 16, 4}, rng, 0.3);
  MorphPrediction p = morph_predict(model, vol, vol);
  for (double x : p.field_d.data()) CHECK(x == 0.0);
  for (double x : p.field_a.data()) CHECK(x == 0.0);
  Tensor out = morph(vol, p.field_d, p.field_a);
  for (std::size_t i = 0; i < vol.numel(); ++i)
    CHECK(out.data()[i] == vol.data()[i]);
}

TEST_CASE("morph_predict: swapping the pair flips V but keeps ||field||") {
  Rng rng(12);
  MorphModel model = make_morph_model(tiny_config(), rng);
  Tensor a = mt_test::random_tensor({1, 16, 16, 4}, rng, 0.3);
  Tensor b = mt_test::random_tensor({1, 16, 16, 4}, rng, 0.3);
  MorphPrediction ab = morph_predict(model, a, b);
  MorphPrediction ba = morph_predict(model, b, a);
  CHECK(l2_norm(ab.field_d).value() ==
        doctest::Approx(l2_norm(ba.field_d).value()).epsilon(1e-9));
  CHECK(l2_norm(ab.field_a).value() ==
        doctest::Approx(l2_norm(ba.field_a).value()).epsilon(1e-9));
}

TEST_CASE("interpolate_features: exact endpoints, affine midpoint, domain") {
  Rng rng(13);
  FeatureMap ft{mt_test::random_tensor({4, 2, 2, 2}, rng),
                mt_test::random_tensor({4, 2, 2, 2}, rng)};
  FeatureMap fk{mt_test::random_tensor({4, 2, 2, 2}, rng),
                mt_test::random_tensor({4, 2, 2, 2}, rng)};
  FeatureMap f0 = interpolate_features(ft, fk, 0.0);
  for (std::size_t i = 0; i < ft.fd.numel(); ++i)
    CHECK(f0.fd.data()[i] == ft.fd.data()[i]);
  FeatureMap f1 = interpolate_features(ft, fk, 1.0);
  for (std::size_t i = 0; i < fk.fd.numel(); ++i)
    CHECK(f1.fd.data()[i] == fk.fd.data()[i]);

  FeatureMap zero{Tensor::zeros({4, 2, 2, 2}), Tensor::zeros({4, 2, 2, 2})};
  FeatureMap two{Tensor::full({4, 2, 2, 2}, 2.0), Tensor::full({4, 2, 2, 2}, 2.0)};
  FeatureMap mid = interpolate_features(zero, two, 0.5);
  for (double v : mid.fd.data()) CHECK(v == 1.0);

  CHECK_THROWS_AS(interpolate_features(ft, fk, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(interpolate_features(ft, fk, 1.1), std::invalid_argument);
}

TEST_CASE("generate_intermediate: rho=0 returns the source exactly and the "
          "field magnitude is linear in rho") {
  Rng rng(14);
  MorphModel model = make_morph_model(tiny_config(), rng);
  Tensor a = mt_test::random_tensor({1, 16, 16, 4}, rng, 0.3);
  Tensor b = mt_test::random_tensor({1, 16, 16, 4}, rng, 0.3);
  FeatureMap fa = model.encoder.forward(a);
  FeatureMap fb = model.encoder.forward(b);

  Tensor at0 = generate_intermediate(model, a, fa,
                                     interpolate_features(fa, fb, 0.0));
  for (std::size_t i = 0; i < a.numel(); ++i)
    CHECK(at0.data()[i] == a.data()[i]);

  const TransformFields full = predict_transform(model, fa, fb);
  const double n_full = l2_norm(full.field_d).value();
  for (double rho : {0.25, 0.5, 1.0}) {
    const TransformFields part =
        predict_transform(model, fa, interpolate_features(fa, fb, rho));
    const double n_part = l2_norm(part.field_d).value();
    CHECK(std::fabs(n_part - rho * n_full) <= 1e-9 * std::max(1.0, n_full));
  }
}

TEST_CASE("parameter collection is stable and named") {
  Rng rng(15);
  MorphModel model = make_morph_model(tiny_config(), rng);
  auto params = model.parameters();
  CHECK(params.size() > 50);
  CHECK(params.front().name == "encoder.stem.w_ip");
  bool saw_scale = false;
  for (const auto& p : params)
    if (p.name == "scales.alpha_mag_d") {
      saw_scale = true;
      CHECK(p.softplus_constrained);
      CHECK(p.effective().value() > 0.0);
    }
  CHECK(saw_scale);
  auto params2 = model.parameters();
  REQUIRE(params.size() == params2.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    CHECK(params[i].name == params2[i].name);
}
