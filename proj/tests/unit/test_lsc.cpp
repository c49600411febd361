#include <doctest.h>

#include <cmath>
#include <random>

#include "cssdiff/errors.hpp"
#include "cssdiff/lsc.hpp"
#include "cssdiff/metrics.hpp"
#include "cssdiff/phantom.hpp"
#include "unit/helpers.hpp"

using namespace cssdiff;
using torch::indexing::Slice;

namespace {

torch::Tensor block_of(const torch::Tensor& img, const CorruptionSpec& s, int blk) {
  const int64_t bh = img.size(0) / s.rows, bw = img.size(1) / s.cols;
  const int64_t r = blk / s.cols, c = blk % s.cols;
  return img.index({Slice(r * bh, (r + 1) * bh), Slice(c * bw, (c + 1) * bw)});
}

ModelBundle tiny_bundle(uint64_t seed) {
  NetConfig c;
  c.base_channels = 4;
  c.depth = 1;
  c.embed_dim = 4;
  c.T_steps = 2;
  c.patch_stride = 8;
  return init_models(c, seed);
}

std::string module_bytes(const torch::nn::Module& m) {
  std::ostringstream os;
  torch::serialize::OutputArchive ar;
  m.save(ar);
  ar.save_to(os);
  return os.str();
}

}  // namespace

TEST_SUITE("lsc") {
  TEST_CASE("clean spec is the identity") {
    CorruptionSpec s;
    s.rotate_fraction = 0.0;
    s.mask_fraction = 0.0;
    const auto y = testutil::rand_image(1, 32, 32, 1)[0][0];
    const auto c = corrupt(y, s);
    CHECK(torch::equal(c.image, y));
    for (auto l : c.labels) CHECK((l == BlockTransform::clean));
  }

  TEST_CASE("half turn applied twice restores the block") {
    const auto b = torch::rand({4, 6});
    CHECK(torch::equal(rotate_block(rotate_block(b, 180), 180), b));
    const auto sq = torch::rand({5, 5});
    CHECK(torch::equal(rotate_block(rotate_block(sq, 90), 270), sq));
    CHECK(torch::equal(rotate_block(sq, 90)[0][0], sq[0][4]));
    CHECK_THROWS_AS(rotate_block(b, 90), ParameterError);
    CHECK_THROWS_AS(rotate_block(sq, 45), ParameterError);
    CHECK_THROWS_AS(rotate_block(torch::rand({2, 2, 2}), 90), ShapeError);
  }

  TEST_CASE("masked block count on a twelve by twelve grid") {
    CorruptionSpec s;
    s.rows = s.cols = 12;
    s.rotate_fraction = 0.0;
    s.mask_fraction = 0.30;
    const auto c = corrupt(testutil::rand_image(1, 96, 96, 2)[0][0] + 0.1, s);
    CHECK(std::count(c.labels.begin(), c.labels.end(), BlockTransform::masked) == 43);
    CHECK(s.masked_count() == static_cast<int>(std::lround(0.30 * 144)));
  }

  TEST_CASE("corruption property over random specs") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 60; ++trial) {
      CorruptionSpec s;
      s.rows = 1 + static_cast<int>(rng() % 8);
      s.cols = s.rows;
      s.rotate_fraction = u(rng) * 0.5;
      s.mask_fraction = u(rng) * (1.0 - s.rotate_fraction);
      s.seed = rng();
      const int64_t bs = 2 + static_cast<int64_t>(rng() % 4);
      const auto y = testutil::rand_image(1, s.rows * bs, s.cols * bs, rng())[0][0] + 0.05;
      const auto c = corrupt(y, s);
      const auto again = corrupt(y, s);
      CHECK(torch::equal(c.image, again.image));
      CHECK((c.labels == again.labels));
      int rot = 0, masked = 0;
      for (int blk = 0; blk < s.block_count(); ++blk) {
        const auto got = block_of(c.image, s, blk), orig = block_of(y, s, blk);
        switch (c.labels[static_cast<size_t>(blk)]) {
          case BlockTransform::clean: CHECK(torch::equal(got, orig)); break;
          case BlockTransform::masked:
            ++masked;
            CHECK(got.abs().sum().item<double>() == 0.0);
            break;
          case BlockTransform::rot90: ++rot; CHECK(torch::equal(got, rotate_block(orig, 90))); break;
          case BlockTransform::rot180: ++rot; CHECK(torch::equal(got, rotate_block(orig, 180))); break;
          case BlockTransform::rot270: ++rot; CHECK(torch::equal(got, rotate_block(orig, 270))); break;
        }
      }
      CHECK(rot == static_cast<int>(std::lround(s.rotate_fraction * s.block_count())));
      CHECK(masked == static_cast<int>(std::lround(s.mask_fraction * s.block_count())));
    }
  }

  TEST_CASE("invalid corruption specs") {
    const auto y = torch::rand({30, 30});
    CorruptionSpec s;
    s.rows = s.cols = 8;
    CHECK_THROWS_AS(corrupt(y, s), ParameterError);
    s.rows = 3;
    s.cols = 5;
    CHECK_THROWS_AS(corrupt(y, s), ParameterError);
    s.angles = {180};
    CHECK_NOTHROW(corrupt(y, s));
    s = {};
    s.rows = s.cols = 3;
    s.rotate_fraction = 0.6;
    s.mask_fraction = 0.6;
    CHECK_THROWS_AS(corrupt(y, s), ParameterError);
    s.mask_fraction = 0.1;
    s.angles = {45};
    CHECK_THROWS_AS(corrupt(y, s), ParameterError);
    CHECK_THROWS_AS(corrupt(torch::rand({1, 30, 30}), CorruptionSpec{}), ShapeError);
  }

  TEST_CASE("spec JSON round trip") {
    CorruptionSpec s;
    s.rows = 12;
    s.cols = 6;
    s.mask_fraction = 0.25;
    s.angles = {180};
    s.seed = 9;
    const auto r = CorruptionSpec::from_json(s.to_json());
    CHECK(r.rows == 12);
    CHECK(r.cols == 6);
    CHECK(r.mask_fraction == 0.25);
    CHECK(r.angles == std::vector<int>{180});
    CHECK(r.seed == 9);
  }

  TEST_CASE("batch corruption uses a seed per image") {
    CorruptionSpec s;
    s.seed = 4;
    const auto y = testutil::rand_image(3, 32, 32, 5);
    const auto c = corrupt_batch(y, s);
    CHECK(c.sizes() == y.sizes());
    CHECK(torch::equal(c, corrupt_batch(y, s)));
    CHECK_FALSE(torch::equal(c[0][0] == 0, c[1][0] == 0));
  }

  TEST_CASE("reconstruction loss hand values") {
    const auto y = testutil::rand_image(2, 16, 16, 6).to(torch::kDouble);
    for (double a : {0.0, 0.5, 3.0}) CHECK(lsc_recon_loss(y, y, a).item<double>() == 0.0);
    CHECK(lsc_recon_loss(y, y + 0.1, 0.0).item<double>() == doctest::Approx(0.1).epsilon(1e-12));
    const auto noise = testutil::rand_image(2, 16, 16, 7).to(torch::kDouble);
    const double l = lsc_recon_loss(y, noise, 1.0).item<double>();
    CHECK(l > 1.0 - ssim(y, noise));
    CHECK_THROWS_AS(lsc_recon_loss(y, y.slice(0, 0, 1), 0.5), ShapeError);
  }

  TEST_CASE("reconstruction loss is positive away from the target and differentiable at it") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
      const auto y = testutil::rand_image(1, 16, 16, rng()).to(torch::kDouble);
      const auto yh = y + 1e-3 * torch::randn_like(y);
      CHECK(lsc_recon_loss(y, yh, 0.5).item<double>() > 0.0);
    }
    const auto y = testutil::rand_image(1, 16, 16, 9).to(torch::kDouble);
    auto yh = y.clone().requires_grad_(true);
    lsc_recon_loss(y, yh, 0.5).backward();
    CHECK(torch::isfinite(yh.grad()).all().item<bool>());
  }

  TEST_CASE("patch adversarial hand values") {
    const auto half = torch::full({2, 4, 4}, 0.5, torch::kDouble);
    const auto t = lsc_adversarial_terms(half, half);
    CHECK(t.disc_term.item<double>() == doctest::Approx(-2.0 * std::log(2.0)).epsilon(1e-12));
    CHECK(t.gen_term.item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    const auto fooled = lsc_adversarial_terms(half, torch::full({2, 4, 4}, 1.0 - 1e-12, torch::kDouble));
    CHECK(fooled.gen_term.item<double>() < 1e-11);
    CHECK_THROWS_AS(lsc_adversarial_terms(half, torch::full({2, 4, 2}, 0.5, torch::kDouble)), ShapeError);
    CHECK_THROWS_AS(lsc_adversarial_terms(half, torch::zeros({2, 4, 4}, torch::kDouble)), DomainError);
  }

  TEST_CASE("patch adversarial on a bundle") {
    auto b = tiny_bundle(10);
    const auto y = testutil::rand_image(2, 32, 32, 11);
    CorruptionSpec s;
    const auto t = lsc_adversarial(b, y, corrupt_batch(y, s));
    CHECK(std::isfinite(t.gen_term.item<double>()));
    CHECK(t.disc_term.item<double>() < 0.0);
  }

  TEST_CASE("config validation") {
    LscConfig c;
    CHECK_NOTHROW(c.validate());
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c = {};
    c.mu = -0.1;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c = {};
    c.alpha = 0.25;
    c.corruption.mask_fraction = 0.4;
    const auto r = LscConfig::from_json(c.to_json());
    CHECK(r.alpha == 0.25);
    CHECK(r.corruption.mask_fraction == 0.4);
  }

  TEST_CASE("zero epochs leave the corrector untouched") {
    auto b = tiny_bundle(12);
    const auto before = module_bytes(*b.corrector);
    const auto disc_before = module_bytes(*b.patch_disc);
    LscConfig cfg;
    cfg.epochs = 0;
    const auto r = pretrain_lsc({generate_phantom(13, {16, 32, 32}, 0)}, b, cfg);
    CHECK(r.epochs_run == 0);
    CHECK(module_bytes(*b.corrector) == before);
    CHECK(module_bytes(*b.patch_disc) == disc_before);
    CHECK_THROWS_AS(pretrain_lsc({}, b, cfg), ParameterError);
  }

  TEST_CASE("an identity corrector on an all-clean spec reproduces the input PSNR") {
    auto b = tiny_bundle(14);
    {
      torch::NoGradGuard g;
      for (auto& p : b.corrector->parameters()) p.zero_();
    }
    CorruptionSpec s;
    s.rotate_fraction = 0.0;
    s.mask_fraction = 0.0;
    const auto [corrupted, restored] = lsc_heldout_psnr(b, {generate_phantom(15, {16, 32, 32}, 0)}, s);
    CHECK(corrupted == kPsnrCap);
    CHECK(restored == corrupted);
  }

  TEST_CASE("short training improves held-out restoration") {
    auto b = tiny_bundle(16);
    LscConfig cfg;
    cfg.epochs = 80;
    cfg.batch_size = 8;
    cfg.seed = 17;
    cfg.corruption.rows = cfg.corruption.cols = 4;
    const std::vector<Volume> heldout{generate_phantom(19, {16, 32, 32}, 0)};
    const auto before = lsc_heldout_psnr(b, heldout, cfg.corruption);
    const auto r = pretrain_lsc({generate_phantom(18, {16, 32, 32}, 0), generate_phantom(20, {16, 32, 32}, 0)}, b, cfg, heldout);
    REQUIRE(r.epoch_losses.size() == 80);
    for (double l : r.epoch_losses) CHECK(std::isfinite(l));
    CHECK(r.heldout_psnr_corrupted == doctest::Approx(before.first));
    CHECK(r.heldout_psnr_restored > before.second + 1.0);
  }

}
