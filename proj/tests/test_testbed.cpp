#include <catch2/catch_amalgamated.hpp>

#include "tpige/testbed.hpp"

using namespace tpige;

namespace {

MixtureWorld two_identity_world(double spread = 1.0, double std_dev = 0.1) {
    MixtureWorld w;
    w.dim = 2;
    w.modes = {{"portrait", "A", {spread, 0.0}, std_dev},
               {"portrait", "B", {-spread, 0.0}, std_dev}};
    w.prior = {0.5, 0.5};
    w.validate();
    return w;
}

// Independent oracle: central finite differences of the closed-form log-density.
Vec fd_score(const Vec& x, size_t t, const ConditionSet& cond, const MixtureWorld& world,
             const TimestepSchedule& sched, double temperature, double h = 1e-5) {
    Vec g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        Vec xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        g[i] = (conditional_log_density(xp, t, cond, world, sched, temperature) -
                conditional_log_density(xm, t, cond, world, sched, temperature)) /
               (2.0 * h);
    }
    return g;
}

}  // namespace

TEST_CASE("make_schedule products") {
    auto s1 = make_schedule(1, 0.5, 0.5);
    REQUIRE(s1.alpha_bar.size() == 1);
    REQUIRE(s1.alpha_bar[0] == Catch::Approx(0.5).epsilon(1e-15));

    auto s2 = make_schedule(2, 0.1, 0.1);
    REQUIRE(s2.alpha_bar[0] == Catch::Approx(0.9).epsilon(1e-15));
    REQUIRE(s2.alpha_bar[1] == Catch::Approx(0.81).epsilon(1e-15));

    // frozen from a direct cumulative-product scratch computation
    auto s50 = make_schedule(50, 1e-4, 0.02);
    REQUIRE(s50.alpha_bar[49] == Catch::Approx(0.602951597329715).epsilon(1e-12));
}

TEST_CASE("make_schedule validation") {
    REQUIRE_THROWS_AS(make_schedule(0, 0.1, 0.2), ParameterError);
    REQUIRE_THROWS_AS(make_schedule(5, 0.2, 0.1), ParameterError);
    REQUIRE_THROWS_AS(make_schedule(5, 0.0, 0.1), ParameterError);
    REQUIRE_THROWS_AS(make_schedule(5, 0.1, 1.0), ParameterError);
}

TEST_CASE("make_schedule monotone and variance-preserving") {
    auto check = [](double bmin, double bmax) {
        auto s = make_schedule(40, bmin, bmax);
        for (size_t t = 1; t < s.steps(); ++t) REQUIRE(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        for (size_t t = 0; t < s.steps(); ++t) {
            const double sig = s.sigma(t);
            REQUIRE(sig * sig + s.alpha_bar[t] == Catch::Approx(1.0).margin(1e-12));
        }
    };
    check(1e-4, 0.02);
    check(0.01, 0.01);
    check(0.3, 0.6);
}

TEST_CASE("forward_noise") {
    auto sched = make_schedule(2, 0.1, 0.1);  // alpha_bar = [0.9, 0.81]
    Vec x0 = {1.0, 0.0};

    SECTION("zero noise scales by sqrt(alpha_bar)") {
        auto s = forward_noise(x0, 1, {0.0, 0.0}, sched);
        REQUIRE(s.x[0] == Catch::Approx(0.9).epsilon(1e-15));
        REQUIRE(s.x[1] == 0.0);
        REQUIRE(s.t == 1);
    }
    SECTION("hand arithmetic at alpha_bar = 0.81") {
        auto s = forward_noise(x0, 1, {1.0, 1.0}, sched);
        REQUIRE(s.x[0] == Catch::Approx(0.9 + std::sqrt(0.19)).epsilon(1e-14));
        REQUIRE(s.x[1] == Catch::Approx(std::sqrt(0.19)).epsilon(1e-14));
    }
    SECTION("dimension mismatch") {
        REQUIRE_THROWS_AS(forward_noise(x0, 1, {0.0}, sched), DimensionError);
    }
}

TEST_CASE("analytic_epsilon basics") {
    auto sched = make_schedule(2, 0.1, 0.1);
    SECTION("vanishes at the noised mean of a single-mode world") {
        MixtureWorld w;
        w.dim = 2;
        w.modes = {{"portrait", "A", {0.7, -0.3}, 0.2}};
        w.prior = {1.0};
        const double ab = sched.alpha_bar[1];
        NoisySample s{{std::sqrt(ab) * 0.7, std::sqrt(ab) * -0.3}, 1};
        Vec eps = analytic_epsilon(s, {}, w, sched);
        REQUIRE(std::abs(eps[0]) < 1e-12);
        REQUIRE(std::abs(eps[1]) < 1e-12);
    }
    SECTION("vanishes at the symmetry point of a two-mode world") {
        auto w = two_identity_world();
        Vec eps = analytic_epsilon({{0.0, 0.0}, 1}, {}, w, sched);
        REQUIRE(std::abs(eps[0]) < 1e-12);
        REQUIRE(std::abs(eps[1]) < 1e-12);
    }
    SECTION("unknown label is a condition error") {
        auto w = two_identity_world();
        ConditionSet bad;
        bad.identity = "Z";
        REQUIRE_THROWS_AS(analytic_epsilon({{0.0, 0.0}, 1}, bad, w, sched), ConditionError);
    }
    SECTION("temperature below 1 rejected") {
        auto w = two_identity_world();
        REQUIRE_THROWS_AS(analytic_epsilon({{0.0, 0.0}, 1}, {}, w, sched, 0.5), ParameterError);
    }
}

TEST_CASE("analytic_epsilon matches finite differences of log-density") {
    auto w = two_identity_world(1.0, 0.1);
    auto sched = make_schedule(2, 0.1, 0.19);  // alpha_bar[1] = 0.9 * 0.81 -- off-grid value
    // the spec's audited point: modes at (+-1, 0), sigma = 0.1, alpha_bar = 0.81
    auto sched81 = make_schedule(2, 0.1, 0.1);
    ConditionSet cond;
    cond.identity = "A";
    Vec x = {0.5, 0.0};
    Vec eps = analytic_epsilon({x, 1}, cond, w, sched81);
    Vec fd = fd_score(x, 1, cond, w, sched81, 1.0);
    const double sig = sched81.sigma(1);
    for (size_t i = 0; i < 2; ++i) {
        const double expected = -sig * fd[i];
        if (std::abs(expected) > 1e-8)
            REQUIRE(std::abs(eps[i] - expected) / std::abs(expected) < 1e-4);
        else
            REQUIRE(std::abs(eps[i] - expected) < 1e-8);
    }
}

TEST_CASE("score matches finite differences at 100 random points") {
    MixtureWorld w;
    w.dim = 2;
    w.modes = {{"run", "A", {1.0, 0.5}, 0.4},
               {"run", "B", {-1.0, 0.2}, 0.7},
               {"sit", "A", {0.3, -1.2}, 0.5}};
    w.prior = {0.5, 0.3, 0.2};
    w.validate();
    auto sched = make_schedule(50, 1e-4, 0.02);
    Rng rng(7);
    std::uniform_int_distribution<size_t> pick_t(0, 49);
    for (int trial = 0; trial < 100; ++trial) {
        const size_t t = pick_t(rng);
        Vec x = gaussian_vec(rng, 2);
        Vec score = conditional_score(x, t, {}, w, sched);
        Vec fd = fd_score(x, t, {}, w, sched, 1.0);
        for (size_t i = 0; i < 2; ++i) {
            const double denom = std::max(1e-6, std::abs(fd[i]));
            REQUIRE(std::abs(score[i] - fd[i]) / denom < 1e-4);
        }
    }
}

TEST_CASE("unconditional epsilon equals prior-weighted mixture score") {
    // closed form spelled out independently for a two-component mixture
    auto w = two_identity_world(0.8, 0.3);
    auto sched = make_schedule(5, 0.05, 0.1);
    const size_t t = 3;
    const double ab = sched.alpha_bar[t];
    const double var = ab * 0.3 * 0.3 + (1.0 - ab);
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Vec x = gaussian_vec(rng, 2);
        double p = 0.0;
        Vec grad_p(2, 0.0);
        for (const auto& m : w.modes) {
            double q = 0.0;
            for (size_t i = 0; i < 2; ++i) {
                const double d = x[i] - std::sqrt(ab) * m.mean[i];
                q += d * d;
            }
            const double comp = 0.5 / (2.0 * M_PI * var) * std::exp(-0.5 * q / var);
            p += comp;
            for (size_t i = 0; i < 2; ++i)
                grad_p[i] += comp * (std::sqrt(ab) * m.mean[i] - x[i]) / var;
        }
        Vec eps = analytic_epsilon({x, int(t)}, {}, w, sched);
        const double sig = sched.sigma(t);
        for (size_t i = 0; i < 2; ++i)
            REQUIRE(eps[i] == Catch::Approx(-sig * grad_p[i] / p).margin(1e-10));
    }
}

TEST_CASE("ancestral_step") {
    SECTION("recovers x0 exactly through a 1-step schedule") {
        auto sched = make_schedule(1, 0.5, 0.5);
        Vec x0 = {0.4, -1.3};
        Vec noise = {0.9, 0.2};
        auto xt = forward_noise(x0, 0, noise, sched);
        auto back = ancestral_step(xt, noise, sched, {0.0, 0.0});
        REQUIRE(back.t == -1);
        REQUIRE(back.x[0] == Catch::Approx(x0[0]).margin(1e-8));
        REQUIRE(back.x[1] == Catch::Approx(x0[1]).margin(1e-8));
    }
    SECTION("t = 0 ignores the noise argument") {
        auto sched = make_schedule(3, 0.1, 0.2);
        NoisySample s{{0.5, -0.5}, 0};
        auto a = ancestral_step(s, {0.1, 0.1}, sched, {5.0, -7.0});
        auto b = ancestral_step(s, {0.1, 0.1}, sched, {0.0, 0.0});
        REQUIRE(a.x == b.x);
    }
    SECTION("hand-computed posterior at t = 1, alpha_bar = [0.9, 0.81]") {
        auto sched = make_schedule(2, 0.1, 0.1);
        auto out = ancestral_step({{1.0}, 1}, {0.5}, sched, {0.3});
        // mean = (x - beta/sigma * eps)/sqrt(alpha), var = beta(1-ab_prev)/(1-ab)
        REQUIRE(out.x[0] == Catch::Approx(1.0020045651989598).epsilon(1e-12));
        REQUIRE(out.t == 0);
    }
    SECTION("dimension mismatch") {
        auto sched = make_schedule(2, 0.1, 0.1);
        REQUIRE_THROWS_AS(ancestral_step({{1.0}, 1}, {0.5, 0.1}, sched, {0.3}), DimensionError);
    }
}

TEST_CASE("mode_hit_rate") {
    auto w = two_identity_world();
    ConditionSet target;
    target.identity = "A";
    SECTION("all at the target mean") {
        REQUIRE(mode_hit_rate({{1.0, 0.0}, {1.0, 0.0}}, w, target) == 1.0);
    }
    SECTION("all at a non-target mode") {
        REQUIRE(mode_hit_rate({{-1.0, 0.0}}, w, target) == 0.0);
    }
    SECTION("mixed") {
        REQUIRE(mode_hit_rate({{0.9, 0.1}, {-1.1, 0.0}}, w, target) == 0.5);
    }
    SECTION("empty input rejected") {
        REQUIRE_THROWS_AS(mode_hit_rate({}, w, target), ParameterError);
    }
}

TEST_CASE("world validation") {
    MixtureWorld w;
    w.dim = 2;
    w.modes = {{"a", "x", {0.0, 0.0}, 1.0}, {"a", "x", {1.0, 0.0}, 1.0}};
    w.prior = {0.5, 0.5};
    REQUIRE_THROWS_AS(w.validate(), ParameterError);  // duplicate (text, identity)

    w.modes[1].identity = "y";
    w.prior = {0.6, 0.5};
    REQUIRE_THROWS_AS(w.validate(), ParameterError);  // prior sum

    w.prior = {0.5, 0.5};
    w.modes[0].std_dev = 0.0;
    REQUIRE_THROWS_AS(w.validate(), ParameterError);  // nonpositive std
}

TEST_CASE("world JSON round trip") {
    auto w = two_identity_world(1.5, 0.25);
    nlohmann::json j = w;
    auto back = j.get<MixtureWorld>();
    REQUIRE(back.modes.size() == 2);
    REQUIRE(back.modes[0].mean == w.modes[0].mean);
    REQUIRE(back.prior == w.prior);
}
