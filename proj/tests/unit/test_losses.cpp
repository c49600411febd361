#include <doctest.h>

#include <cmath>
#include <random>

#include "cssdiff/errors.hpp"
#include "cssdiff/losses.hpp"
#include "cssdiff/models.hpp"
#include "cssdiff/phantom.hpp"
#include "oracles/finite_diff.hpp"

using namespace cssdiff;

namespace {

torch::Tensor full(double v, std::vector<int64_t> shape = {4}) { return torch::full(shape, v, torch::kDouble); }

double value(const torch::Tensor& t) { return t.item<double>(); }

Volume ramp_volume(Shape3 s, float offset) {
  Volume v(s, {1.0, 1.0, 1.0}, 3.0);
  for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = offset + 0.001f * static_cast<float>(i % 97);
  return v;
}

// Reference MSE written out directly against the slice re-indexing rule.
double mse_against_shift(const Volume& pred, const Volume& hf, int s) {
  const int64_t Z = hf.shape.z;
  double acc = 0.0;
  for (int64_t z = 0; z < Z; ++z) {
    const int64_t src = std::clamp<int64_t>(z + s, 0, Z - 1);
    for (int64_t y = 0; y < hf.shape.y; ++y)
      for (int64_t x = 0; x < hf.shape.x; ++x) {
        const double d = static_cast<double>(pred.at(z, y, x)) - hf.at(src, y, x);
        acc += d * d;
      }
  }
  return acc / static_cast<double>(hf.shape.voxels());
}

struct TinySetup {
  ModelBundle b;
  DiffusionSchedule sched = DiffusionSchedule::default_for(2);
  torch::Tensor x0, y, cond;
  std::vector<torch::Tensor> zs, zs_back;
  LossWeights w;

  TinySetup() : b(make()) {
    auto gen = at::detail::createCPUGenerator(5);
    const auto dopt = torch::TensorOptions().dtype(torch::kDouble);
    x0 = torch::rand({2, 1, 8, 8}, gen, dopt);
    y = torch::rand({2, 1, 8, 8}, gen, dopt);
    cond = torch::randn({2, 4}, gen, dopt);
    for (int t = 0; t < 2; ++t) {
      zs.push_back(torch::randn({2, 1, 8, 8}, gen, dopt));
      zs_back.push_back(torch::randn({2, 1, 8, 8}, gen, dopt));
    }
  }

  static ModelBundle make() {
    NetConfig c;
    c.base_channels = 4;
    c.depth = 1;
    c.embed_dim = 4;
    c.T_steps = 2;
    c.patch_stride = 4;
    c.dropout = 0.0;
    auto b = init_models(c, 11);
    for (auto& m : b.named_modules()) m.module->to(torch::kDouble);
    return b;
  }

  Objective objective() {
    const auto states = apply_chain(b, x0, zs, cond);
    const auto& xT = states.back();
    LossParts p;
    p.adv_d = adv_d_loss(discriminate(b, y), discriminate(b, xT.detach()));
    p.adv_g = adv_g_loss(discriminate(b, xT));
    p.cyc = cycle_loss(x0, apply_reverse(b, xT), y, apply_chain(b, apply_reverse(b, y), zs_back, cond).back(), w.rho);
    std::vector<torch::Tensor> all{x0};
    all.insert(all.end(), states.begin(), states.end());
    p.path = path_consistency_loss(all, chain_noise_predictions(all, sched), sched, w.path_weights(2));
    return total_objective(p, w);
  }
};

void zero_grads(ModelBundle& b) {
  for (auto& m : b.named_modules())
    for (auto& p : m.module->parameters())
      if (p.grad().defined()) p.mutable_grad().zero_();
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("discriminator loss hand values") {
    CHECK(value(adv_d_loss(full(0.5), full(0.5))) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
    CHECK(value(adv_d_loss(full(1.0 - 1e-9), full(1e-9))) < 1e-8);
    CHECK(value(adv_d_loss(full(1.0 - 1e-9), full(1e-9))) > 0.0);
    CHECK_THROWS_AS(adv_d_loss(full(0.0), full(0.5)), DomainError);
    CHECK_THROWS_AS(adv_d_loss(full(0.5), full(1.0)), DomainError);
    CHECK_THROWS_AS(adv_d_loss(full(0.5), torch::tensor({0.5, std::nan("")}, torch::kDouble)), DomainError);
  }

  TEST_CASE("generator loss hand values") {
    CHECK(value(adv_g_loss(full(0.5))) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(value(adv_g_loss(full(1e-9))) == doctest::Approx(-std::log(1e-9)).epsilon(1e-9));
    CHECK(value(adv_g_loss(full(1e-9))) == doctest::Approx(20.72).epsilon(1e-3));
    CHECK(value(adv_g_loss(full(1.0 - 1e-12))) < 1e-11);
    CHECK_THROWS_AS(adv_g_loss(full(-0.1)), DomainError);
    CHECK_THROWS_AS(adv_g_loss(torch::empty({0}, torch::kDouble)), DomainError);
  }

  TEST_CASE("cycle loss hand values") {
    const auto x = torch::rand({2, 1, 4, 4}, torch::kDouble);
    const auto y = torch::rand({2, 1, 4, 4}, torch::kDouble);
    CHECK(value(cycle_loss(x, x, y, y, 1.0)) == 0.0);
    CHECK(value(cycle_loss(x, x + 0.1, y, y, 3.7)) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(value(cycle_loss(x, x - 0.1, y, y + 0.3, 0.0)) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(value(cycle_loss(x, x - 0.1, y, y + 0.3, 2.0)) == doctest::Approx(0.7).epsilon(1e-12));
    CHECK_THROWS_AS(cycle_loss(x, x.slice(0, 0, 1), y, y, 1.0), ShapeError);
    CHECK_THROWS_AS(cycle_loss(x, x, y, y.slice(3, 0, 2), 1.0), ShapeError);
  }

  TEST_CASE("path loss is zero on the reference trajectory") {
    const auto sched = DiffusionSchedule::default_for(4);
    auto gen = at::detail::createCPUGenerator(3);
    std::vector<torch::Tensor> states{torch::randn({2, 1, 4, 4}, gen, torch::kDouble)};
    std::vector<torch::Tensor> eps;
    for (int k = 1; k <= 4; ++k) {
      eps.push_back(torch::randn({2, 1, 4, 4}, gen, torch::kDouble));
      states.push_back(ddim_step(states.back(), 4 - k + 1, eps.back(), sched));
    }
    CHECK(value(path_consistency_loss(states, eps, sched, {0.2, 0.3, 0.5})) < 1e-24);

    states[2] = states[2] + 0.2;
    CHECK(value(path_consistency_loss(states, eps, sched, {0.0, 1.0, 0.0})) == doctest::Approx(0.04).epsilon(1e-10));
    CHECK(value(path_consistency_loss(states, eps, sched, {0.0, 0.0, 0.0})) == 0.0);
  }

  TEST_CASE("path loss arity checks") {
    const auto sched = DiffusionSchedule::default_for(3);
    std::vector<torch::Tensor> states(4, torch::zeros({1, 1, 2, 2}, torch::kDouble));
    std::vector<torch::Tensor> eps(3, torch::zeros({1, 1, 2, 2}, torch::kDouble));
    CHECK_NOTHROW(path_consistency_loss(states, eps, sched, {0.5, 0.5}));
    CHECK_THROWS_AS(path_consistency_loss(states, eps, sched, {1.0}), ArityError);
    CHECK_THROWS_AS(path_consistency_loss({states.begin(), states.end() - 1}, eps, sched, {0.5, 0.5}), ArityError);
    CHECK_THROWS_AS(path_consistency_loss(states, {eps.front()}, sched, {0.5, 0.5}), ArityError);
  }

  TEST_CASE("noise recovered from the chain reproduces the clean end point") {
    const auto sched = DiffusionSchedule::default_for(4);
    auto gen = at::detail::createCPUGenerator(8);
    std::vector<torch::Tensor> states;
    for (int k = 0; k <= 4; ++k) states.push_back(torch::randn({1, 1, 3, 3}, gen, torch::kDouble));
    const auto eps = chain_noise_predictions(states, sched);
    REQUIRE(eps.size() == 4);
    for (int k = 0; k < 4; ++k) {
      const auto x0_hat = estimate_x0(states[k], 4 - k, eps[k], sched);
      CHECK((x0_hat - states[4]).abs().max().item<double>() < 1e-10);
    }
    CHECK_THROWS_AS(chain_noise_predictions({states.begin(), states.end() - 1}, sched), ArityError);
  }

  TEST_CASE("weights validation and path weights") {
    LossWeights w;
    CHECK(w.path_weights(4) == std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3});
    CHECK(w.path_weights(1).empty());
    w.eta = {0.5};
    CHECK_THROWS_AS(w.path_weights(4), ArityError);
    w.eta = {};
    w.lambda_cyc = -1.0;
    CHECK_THROWS_AS(w.validate(), ParameterError);
    w.lambda_cyc = std::nan("");
    CHECK_THROWS_AS(w.validate(), ParameterError);
    CHECK_THROWS_AS(LossWeights::from_json({{"eta", {0.1, -0.2}}}), ParameterError);
    LossWeights v;
    v.lambda_path = 0.25;
    v.eta = {0.1, 0.9};
    const auto r = LossWeights::from_json(v.to_json());
    CHECK(r.lambda_path == 0.25);
    CHECK(r.eta == v.eta);
  }

  TEST_CASE("total objective weighting") {
    LossParts p{full(0.7, {}), full(1.3, {}), full(0.1, {}), full(0.05, {})};
    LossWeights w;
    w.lambda_adv = 1.0;
    w.lambda_cyc = 0.0;
    w.lambda_path = 0.0;
    CHECK(value(total_objective(p, w).gen_loss) == doctest::Approx(0.7));
    w = {0.0, 1.0, 0.0};
    CHECK(value(total_objective(p, w).gen_loss) == doctest::Approx(0.1));
    w = {0.0, 0.0, 0.0};
    CHECK(value(total_objective(p, w).gen_loss) == 0.0);
    CHECK(value(total_objective(p, w).disc_loss) == doctest::Approx(1.3));
  }

  TEST_CASE("total objective is linear in the weights") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 5.0);
    for (int trial = 0; trial < 100; ++trial) {
      LossParts p{full(u(rng), {}), full(u(rng), {}), full(u(rng), {}), full(u(rng), {})};
      LossWeights w{u(rng), u(rng), u(rng)};
      LossWeights w2{2 * w.lambda_adv, 2 * w.lambda_cyc, 2 * w.lambda_path};
      const double g1 = value(total_objective(p, w).gen_loss), g2 = value(total_objective(p, w2).gen_loss);
      CHECK(g2 == doctest::Approx(2 * g1).epsilon(1e-12));
      const double expect = w.lambda_adv * value(p.adv_g) + w.lambda_cyc * value(p.cyc) + w.lambda_path * value(p.path);
      CHECK(g1 == doctest::Approx(expect).epsilon(1e-12));
    }
  }

  TEST_CASE("losses are non-negative on random inputs") {
    std::mt19937_64 rng(2);
    const auto sched = DiffusionSchedule::default_for(3);
    for (int trial = 0; trial < 50; ++trial) {
      auto gen = at::detail::createCPUGenerator(rng());
      const auto s1 = torch::rand({5}, gen, torch::kDouble) * 0.98 + 0.01;
      const auto s2 = torch::rand({5}, gen, torch::kDouble) * 0.98 + 0.01;
      CHECK(value(adv_d_loss(s1, s2)) >= 0.0);
      CHECK(value(adv_g_loss(s2)) >= 0.0);
      const auto a = torch::randn({2, 1, 4, 4}, gen, torch::kDouble), b = torch::randn({2, 1, 4, 4}, gen, torch::kDouble);
      CHECK(value(cycle_loss(a, b, b, a, 0.5)) >= 0.0);
      std::vector<torch::Tensor> states, eps;
      for (int k = 0; k <= 3; ++k) states.push_back(torch::randn({1, 1, 4, 4}, gen, torch::kDouble));
      for (int k = 0; k < 3; ++k) eps.push_back(torch::randn({1, 1, 4, 4}, gen, torch::kDouble));
      CHECK(value(path_consistency_loss(states, eps, sched, {0.5, 0.5})) >= 0.0);
      CHECK(cycle_error(a, b).min().item<double>() >= 0.0);
    }
  }

  TEST_CASE("cycle error is per sample") {
    const auto x = torch::rand({3, 1, 4, 4}, torch::kDouble);
    CHECK(cycle_error(x, x).abs().sum().item<double>() == 0.0);
    auto off = x.clone();
    off[1] += 0.05;
    off[2] -= 0.2;
    const auto e = cycle_error(x, off);
    REQUIRE(e.sizes() == torch::IntArrayRef{3});
    CHECK(e[0].item<double>() == 0.0);
    CHECK(e[1].item<double>() == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(e[2].item<double>() == doctest::Approx(0.2).epsilon(1e-12));
    CHECK_THROWS_AS(cycle_error(x, x.slice(0, 0, 2)), ShapeError);
  }

  TEST_CASE("alignment error") {
    const Shape3 s{6, 4, 5};
    const auto hf = ramp_volume(s, 0.2f);
    CHECK(alignment_error(hf, hf, {0}) == 0.0);
    const auto pred = ramp_volume(s, 0.25f);
    const double a = mse_against_shift(pred, hf, 0), b = mse_against_shift(pred, hf, 1);
    CHECK(a == doctest::Approx(0.0025).epsilon(1e-5));
    CHECK(alignment_error(pred, hf, {0, 1}) == doctest::Approx((a + b) / 2).epsilon(1e-12));
    CHECK(alignment_error(pred, hf, {-2}) == doctest::Approx(mse_against_shift(pred, hf, -2)).epsilon(1e-12));
    CHECK_THROWS_AS(alignment_error(pred, hf, {}), ParameterError);
    CHECK_THROWS_AS(alignment_error(pred, hf, {6}), RangeError);
    CHECK_THROWS_AS(alignment_error(ramp_volume({5, 4, 5}, 0.0f), hf, {0}), ShapeError);
  }

  TEST_CASE("analytic gradients match central differences") {
    TinySetup st;
    auto& b = st.b;
    zero_grads(b);
    st.objective().gen_loss.backward();
    for (const char* name : {"chain_1", "reverse"}) {
      for (const auto& m : b.named_modules()) {
        if (m.name != name) continue;
        for (auto& p : m.module->parameters()) {
          const auto analytic = p.grad().clone();
          const auto r = oracle::check_gradient(p, analytic, [&] {
            torch::NoGradGuard g;
            return st.objective().gen_loss.item<double>();
          });
          CHECK(r.group_rel() < 1e-3);
        }
      }
    }
    zero_grads(b);
    st.objective().disc_loss.backward();
    for (auto& p : b.disc->parameters()) {
      const auto analytic = p.grad().clone();
      const auto r = oracle::check_gradient(p, analytic, [&] {
        torch::NoGradGuard g;
        return st.objective().disc_loss.item<double>();
      });
      CHECK(r.group_rel() < 1e-3);
    }
  }

  TEST_CASE("adversarial losses respect the detachment contract") {
    TinySetup st;
    auto& b = st.b;
    zero_grads(b);
    const auto xT = apply_chain(b, st.x0, st.zs, st.cond).back();
    adv_d_loss(discriminate(b, st.y), discriminate(b, xT.detach())).backward();
    for (const auto& p : b.generator_parameters()) CHECK((!p.grad().defined() || p.grad().abs().sum().item<double>() == 0.0));
    double d_norm = 0.0;
    for (const auto& p : b.disc->parameters()) d_norm += p.grad().abs().sum().item<double>();
    CHECK(d_norm > 0.0);

    zero_grads(b);
    {
      FrozenParameters frozen(*b.disc);
      adv_g_loss(discriminate(b, apply_chain(b, st.x0, st.zs, st.cond).back())).backward();
    }
    for (const auto& p : b.disc->parameters()) CHECK((!p.grad().defined() || p.grad().abs().sum().item<double>() == 0.0));
    double g_norm = 0.0;
    for (const auto& p : b.chain_parameters()) g_norm += p.grad().abs().sum().item<double>();
    CHECK(g_norm > 0.0);
  }

  TEST_CASE("every loss reaches every parameter group it is defined over") {
    TinySetup st;
    auto& b = st.b;
    auto grad_norm = [](const std::vector<torch::Tensor>& ps) {
      double s = 0.0;
      for (const auto& p : ps)
        if (p.grad().defined()) s += p.grad().abs().sum().item<double>();
      return s;
    };
    const auto states = apply_chain(b, st.x0, st.zs, st.cond);
    std::vector<torch::Tensor> all{st.x0};
    all.insert(all.end(), states.begin(), states.end());

    zero_grads(b);
    adv_g_loss(discriminate(b, states.back())).backward({}, true);
    for (auto& g : b.chain) CHECK(grad_norm(g->parameters()) > 0.0);

    zero_grads(b);
    cycle_loss(st.x0, apply_reverse(b, states.back()), st.y, apply_chain(b, apply_reverse(b, st.y), st.zs_back, st.cond).back(), 1.0)
        .backward({}, true);
    for (auto& g : b.chain) CHECK(grad_norm(g->parameters()) > 0.0);
    CHECK(grad_norm(b.reverse->parameters()) > 0.0);

    zero_grads(b);
    path_consistency_loss(all, chain_noise_predictions(all, st.sched), st.sched, {1.0}).backward({}, true);
    for (auto& g : b.chain) CHECK(grad_norm(g->parameters()) > 0.0);

    zero_grads(b);
    adv_d_loss(discriminate(b, st.y), discriminate(b, states.back().detach())).backward();
    CHECK(grad_norm(b.disc->parameters()) > 0.0);
  }
}
