#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "cssdiff/errors.hpp"
#include "cssdiff/sgp.hpp"
#include "cssdiff/tensor_bridge.hpp"
#include "unit/helpers.hpp"

using namespace cssdiff;

namespace {

torch::Tensor unit_rows(int64_t n, int64_t e, uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  const auto x = torch::randn({n, e}, gen, torch::TensorOptions().dtype(torch::kDouble));
  return x / x.norm(2, {1}, true);
}

SliceEncoder tiny_encoder(uint64_t seed) {
  torch::manual_seed(seed);
  return SliceEncoder(4, 2, 8);
}

// Noiseless pair: the low-field volume is the high-field one re-indexed.
PairedSample noiseless_sample(uint64_t seed, int shift) {
  PairedSample s;
  s.hf = generate_phantom(seed, {16, 32, 32}, 0);
  s.lf = inject_slice_shift(s.hf, shift);
  s.slice_shift = shift;
  s.sample_id = "n" + std::to_string(seed);
  return s;
}

std::string module_bytes(const torch::nn::Module& m) {
  std::ostringstream os;
  torch::serialize::OutputArchive ar;
  m.save(ar);
  ar.save_to(os);
  return os.str();
}

}  // namespace

TEST_SUITE("sgp") {
  TEST_CASE("config validation and JSON") {
    SgpConfig c;
    CHECK_NOTHROW(c.validate());
    c.tau = 0.0;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c.tau = 10.5;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c.tau = 10.0;
    CHECK_NOTHROW(c.validate());
    c.view_weight = -1.0;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    SgpConfig d;
    d.tau = 0.3;
    d.warmup_epochs = 5;
    d.supervised_positives = true;
    const auto r = SgpConfig::from_json(d.to_json());
    CHECK(r.tau == 0.3);
    CHECK(r.warmup_epochs == 5);
    CHECK(r.supervised_positives);
  }

  TEST_CASE("info nce hand values") {
    const auto eye = torch::eye(2, torch::kDouble);
    CHECK(info_nce_loss(eye, eye, {0, 1}, 1.0).item<double>() ==
          doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0))).epsilon(1e-12));
    CHECK(info_nce_loss(eye, eye, {0, 1}, 1.0).item<double>() == doctest::Approx(0.313262).epsilon(1e-6));
    const auto same = torch::ones({5, 1}, torch::kDouble);
    CHECK(info_nce_loss(same, same, {0, 3, 1, 4, 2}, 0.7).item<double>() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    CHECK(info_nce_loss(eye, eye, {0, 1}, 1e-3).item<double>() < 1e-12);
  }

  TEST_CASE("info nce argument checks") {
    const auto e = unit_rows(3, 4, 1);
    CHECK_THROWS_AS(info_nce_loss(e * 1.01, e, {0, 1, 2}, 0.1), ContractError);
    CHECK_THROWS_AS(info_nce_loss(e, e, {0, 1}, 0.1), ArityError);
    CHECK_THROWS_AS(info_nce_loss(e, e, {0, 1, 3}, 0.1), RangeError);
    CHECK_THROWS_AS(info_nce_loss(e, unit_rows(3, 5, 2), {0, 1, 2}, 0.1), ShapeError);
    CHECK_THROWS_AS(info_nce_loss(e, e, {0, 1, 2}, 0.0), ParameterError);
  }

  TEST_CASE("info nce bounds with mined positives") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
      const int64_t n = 2 + static_cast<int64_t>(rng() % 14);
      const auto a = unit_rows(n, 6, rng()), b = unit_rows(n, 6, rng());
      for (double tau : {0.05, 1.0, 10.0}) {
        const double l = info_nce_loss(a, b, mine_positives(a, b), tau).item<double>();
        CHECK(l >= 0.0);
        CHECK(l <= std::log(static_cast<double>(n)) + 1e-9);
      }
      std::vector<int64_t> any(static_cast<size_t>(n));
      for (auto& p : any) p = static_cast<int64_t>(rng() % static_cast<uint64_t>(n));
      CHECK(info_nce_loss(a, b, any, 0.2).item<double>() >= 0.0);
    }
  }

  TEST_CASE("info nce is equivariant to a shared permutation") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      const int64_t n = 2 + static_cast<int64_t>(rng() % 10);
      const auto a = unit_rows(n, 5, rng()), b = unit_rows(n, 5, rng());
      std::vector<int64_t> pos(static_cast<size_t>(n)), perm(static_cast<size_t>(n));
      for (auto& p : pos) p = static_cast<int64_t>(rng() % static_cast<uint64_t>(n));
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      // b'[perm[j]] = b[j], so positive j moves to perm[j].
      std::vector<int64_t> inv(static_cast<size_t>(n));
      for (int64_t j = 0; j < n; ++j) inv[static_cast<size_t>(perm[j])] = j;
      const auto bp = b.index_select(0, torch::tensor(inv, torch::kLong));
      std::vector<int64_t> pos_p;
      for (int64_t p : pos) pos_p.push_back(perm[static_cast<size_t>(p)]);
      CHECK(std::abs(info_nce_loss(a, b, pos, 0.3).item<double>() - info_nce_loss(a, bp, pos_p, 0.3).item<double>()) < 1e-6);
    }
  }

  TEST_CASE("mining is invariant to a common rescaling") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      const auto a = unit_rows(6, 4, rng()), b = unit_rows(9, 4, rng());
      const double s = 0.01 + 100.0 * std::uniform_real_distribution<double>(0, 1)(rng);
      CHECK(mine_positives(a, b) == mine_positives(s * a, s * b));
    }
  }

  TEST_CASE("mining ties resolve to the lowest index") {
    const auto a = torch::tensor({{1.0, 0.0}}, torch::kDouble);
    const auto b = torch::tensor({{0.0, 1.0}, {1.0, 0.0}, {1.0, 0.0}}, torch::kDouble);
    CHECK(mine_positives(a, b) == std::vector<int64_t>{1});
  }

  TEST_CASE("mining finds an exact copy") {
    auto enc = tiny_encoder(6);
    enc->eval();
    const auto hf = testutil::rand_image(6, 16, 16, 7);
    for (int64_t k = 0; k < 6; ++k) CHECK(mine_positive(hf[k][0], hf, enc) == k);
    CHECK(mine_positive(hf[2][0], hf.slice(0, 2, 3), enc) == 0);
    CHECK_THROWS_AS(mine_positive(hf[0][0], hf.slice(0, 0, 0), enc), ParameterError);
  }

  TEST_CASE("slice batches carry a shuffled correspondence") {
    const auto s = noiseless_sample(8, 2);
    const auto b = make_slice_batch(s, 9);
    const int64_t n = 16;
    const auto hf = to_slices(s.hf);
    REQUIRE(b.lf.size(0) == n);
    REQUIRE(b.true_perm.size() == static_cast<size_t>(n));
    std::vector<int64_t> seen;
    for (int64_t i = 0; i < n; ++i) {
      CHECK(torch::equal(b.hf[b.nominal[i]], hf[i]));
      if (b.interior[i]) {
        CHECK(torch::equal(b.lf[i], b.hf[b.true_perm[i]]));
        seen.push_back(b.true_perm[i]);
      }
    }
    CHECK(b.interior[n - 1] == false);
    CHECK(b.interior[n - 2] == false);
    std::sort(seen.begin(), seen.end());
    CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
    PairedSample one;
    one.hf = Volume({1, 8, 8}, {1.0, 1.0, 1.0}, 3.0);
    one.lf = one.hf;
    CHECK_THROWS_AS(make_slice_batch(one, 1), ParameterError);
  }

  TEST_CASE("augmented views keep shape and depend on the seed") {
    const auto x = testutil::rand_image(3, 16, 16, 10);
    const auto v1 = augment_view(x, 1), v2 = augment_view(x, 1), v3 = augment_view(x, 2);
    CHECK(v1.sizes() == x.sizes());
    CHECK(torch::equal(v1, v2));
    CHECK_FALSE(torch::equal(v1, v3));
    CHECK_THROWS_AS(augment_view(torch::rand({3, 16, 16}), 1), ShapeError);
  }

  TEST_CASE("condition embedding is a deterministic unit vector") {
    auto enc = tiny_encoder(11);
    const auto s = torch::rand({16, 16});
    const auto e = condition_embedding(enc, s);
    CHECK(e.numel() == 8);
    CHECK(std::abs(e.norm().item<double>() - 1.0) < 1e-5);
    CHECK(torch::equal(e, condition_embedding(enc, s)));
  }

  TEST_CASE("zero epochs leave the encoder untouched") {
    auto enc = tiny_encoder(12);
    const auto before = module_bytes(*enc);
    SgpConfig cfg;
    cfg.epochs = 0;
    const auto r = pretrain_sgp({noiseless_sample(13, 1)}, enc, cfg);
    CHECK(module_bytes(*enc) == before);
    CHECK(r.epochs_run == 0);
  }

  TEST_CASE("supervised positives on noiseless pairs recover every slice") {
    auto enc = tiny_encoder(14);
    SgpConfig cfg;
    cfg.supervised_positives = true;
    cfg.epochs = 40;
    cfg.lr = 3e-3;
    cfg.seed = 15;
    const std::vector<PairedSample> train{noiseless_sample(16, 2), noiseless_sample(17, -1)};
    const auto r = pretrain_sgp(train, enc, cfg);
    CHECK(r.epochs_run == 40);
    CHECK(r.mining_accuracy == 1.0);
    CHECK(mining_accuracy(enc, train, 99) == 1.0);
  }

  TEST_CASE("a large temperature keeps the loss inside its bound") {
    auto enc = tiny_encoder(18);
    SgpConfig cfg;
    cfg.tau = 10.0;
    cfg.epochs = 4;
    cfg.warmup_epochs = 1;
    cfg.seed = 19;
    const auto r = pretrain_sgp({noiseless_sample(20, 1)}, enc, cfg);
    REQUIRE(r.epoch_losses.size() == 4);
    for (double l : r.epoch_losses) {
      CHECK(l >= 0.0);
      CHECK(l <= std::log(16.0) + 1e-6);
    }
  }

  TEST_CASE("volumes with a single slice are rejected") {
    auto enc = tiny_encoder(21);
    PairedSample s;
    s.hf = Volume({1, 16, 16}, {1.0, 1.0, 1.0}, 3.0);
    s.lf = s.hf;
    SgpConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS_AS(pretrain_sgp({s}, enc, cfg), ParameterError);
  }
}
