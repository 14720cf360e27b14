#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ssl2d/autodiff.hpp"
#include "ssl2d/etlayer.hpp"
#include "ssl2d/rng.hpp"

// Central finite-difference verification of every differentiable op, at
// 64-bit with h = 1e-5 and relative tolerance 1e-5, on randomized small
// shapes. Shared by the unit tests, the `gradcheck` CLI subcommand and the
// acceptance suite.

namespace ssl2d::gradcheck {

struct OpReport {
    std::string op;
    int shapes_checked = 0;
    double max_rel_err = 0.0;
    bool pass = true;
};

namespace detail {

struct Problem {
    // inputs[i] is differentiated iff differentiable[i]
    std::vector<ad::Shape> shapes;
    std::vector<bool> differentiable;
    std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)> build;  // any output shape
    // backward contract as a multiple of the forward Jacobian (grad_reverse: -lambda)
    double backward_scale = 1.0;
};

inline double run_problem(const Problem& prob, const std::vector<std::vector<double>>& inputs,
                          const std::vector<double>& loss_weights, double h) {
    auto build_loss = [&](ad::Tape& t, const std::vector<std::vector<double>>& vals,
                          std::vector<ad::Var>& xs) {
        for (std::size_t i = 0; i < prob.shapes.size(); ++i) {
            xs.push_back(t.constant(prob.shapes[i], vals[i]));
            if (prob.differentiable[i]) t.want_grad(xs.back());
        }
        ad::Var out = prob.build(t, xs);
        ad::Var w = t.constant(out.shape(), loss_weights);
        return ad::sum(ad::mul(out, w));
    };
    auto loss_value = [&](const std::vector<std::vector<double>>& vals) {
        ad::Tape t;
        std::vector<ad::Var> xs;
        return build_loss(t, vals, xs).scalar();
    };

    // analytic gradients
    ad::Tape tape;
    std::vector<ad::Var> xs;
    tape.backward(build_loss(tape, inputs, xs));
    std::vector<std::vector<double>> analytic;
    for (std::size_t i = 0; i < xs.size(); ++i) analytic.push_back(tape.grad(xs[i].id));

    double max_rel = 0.0;
    auto vals = inputs;
    for (std::size_t i = 0; i < vals.size(); ++i) {
        if (!prob.differentiable[i]) continue;
        for (std::size_t j = 0; j < vals[i].size(); ++j) {
            const double saved = vals[i][j];
            vals[i][j] = saved + h;
            const double fp = loss_value(vals);
            vals[i][j] = saved - h;
            const double fm = loss_value(vals);
            vals[i][j] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[i][j];
            const double expected = prob.backward_scale * numeric;
            const double err =
                std::abs(a - expected) / std::max({1.0, std::abs(a), std::abs(expected)});
            max_rel = std::max(max_rel, err);
        }
    }
    return max_rel;
}

inline std::vector<double> random_values(const ad::Shape& s, rng::Rng& r, double lo, double hi) {
    std::vector<double> v(static_cast<std::size_t>(s.numel()));
    for (auto& x : v) x = r.uniform(lo, hi);
    return v;
}

/// keep |x| away from the ReLU kink so finite differences stay two-sided
inline void avoid_kink(std::vector<double>& v) {
    for (auto& x : v)
        if (std::abs(x) < 1e-2) x = x < 0.0 ? x - 1e-2 : x + 1e-2;
}

}  // namespace detail

inline OpReport check_op(const std::string& name, int n_shapes, std::uint64_t seed,
                         const std::function<detail::Problem(rng::Rng&)>& make_problem,
                         double h = 1e-5, double tol = 1e-5) {
    OpReport rep;
    rep.op = name;
    rng::Rng r(rng::derive_seed(seed, rng::hash_str("gradcheck:" + name)));
    for (int k = 0; k < n_shapes; ++k) {
        detail::Problem prob = make_problem(r);
        std::vector<std::vector<double>> inputs;
        for (const auto& s : prob.shapes) inputs.push_back(detail::random_values(s, r, -1.0, 1.0));

        // probe output shape once to size the loss weights
        ad::Tape t;
        std::vector<ad::Var> xs;
        for (std::size_t i = 0; i < prob.shapes.size(); ++i)
            xs.push_back(t.constant(prob.shapes[i], inputs[i]));
        const ad::Shape out_shape = prob.build(t, xs).shape();
        t.clear();

        // op-specific input conditioning
        if (name == "relu")
            detail::avoid_kink(inputs[0]);
        if (name == "bce_loss") {
            for (auto& x : inputs[0]) x = 0.05 + 0.9 * std::abs(x);           // prob in (0.05, 0.95)
            for (auto& x : inputs[1]) x = x > 0.0 ? 1.0 : 0.0;                // labels in {0,1}
        }
        if (name == "sigmoid" || name == "dense" || name == "conv2d" || name == "upconv2d")
            for (auto& in : inputs)
                for (auto& x : in) x *= 0.8;

        const auto weights = detail::random_values(out_shape, r, -1.0, 1.0);
        const double err = detail::run_problem(prob, inputs, weights, h);
        rep.max_rel_err = std::max(rep.max_rel_err, err);
        ++rep.shapes_checked;
        if (err > tol) rep.pass = false;
    }
    return rep;
}

/// The full suite (autodiff + et layer). n_shapes >= 5 per op.
inline std::vector<OpReport> run_all(std::uint64_t seed = 20210301, int n_shapes = 5) {
    using detail::Problem;
    std::vector<OpReport> out;

    out.push_back(check_op("dense", n_shapes, seed, [](rng::Rng& r) {
        const int n = r.uniform_int(1, 4), f = r.uniform_int(1, 6), o = r.uniform_int(1, 6);
        Problem p;
        p.shapes = {ad::Shape{n, f}, ad::Shape{f, o}, ad::Shape{o}};
        p.differentiable = {true, true, true};
        p.build = [](ad::Tape&, const std::vector<ad::Var>& xs) {
            return ad::dense(xs[0], xs[1], xs[2]);
        };
        return p;
    }));

    out.push_back(check_op("conv2d", n_shapes, seed, [](rng::Rng& r) {
        const int n = r.uniform_int(1, 2), c = r.uniform_int(1, 3), oc = r.uniform_int(1, 3);
        const int h = r.uniform_int(3, 7), w = r.uniform_int(3, 7);
        const int k = r.uniform_int(0, 1) ? 3 : 1;
        const int stride = r.uniform_int(1, 2);
        Problem p;
        p.shapes = {ad::Shape{n, c, h, w}, ad::Shape{oc, c, k, k}, ad::Shape{oc}};
        p.differentiable = {true, true, true};
        p.build = [k, stride](ad::Tape&, const std::vector<ad::Var>& xs) {
            ad::Conv2dSpec sp;
            sp.stride_h = sp.stride_w = stride;
            sp.pad_h = sp.pad_w = (k - 1) / 2;
            return ad::conv2d(xs[0], xs[1], xs[2], sp);
        };
        return p;
    }));

    out.push_back(check_op("upconv2d", n_shapes, seed, [](rng::Rng& r) {
        const int n = r.uniform_int(1, 2), c = r.uniform_int(1, 2), oc = r.uniform_int(1, 3);
        const int h = r.uniform_int(2, 4), w = r.uniform_int(2, 4);
        const int factor = r.uniform_int(1, 3);
        Problem p;
        p.shapes = {ad::Shape{n, c, h, w}, ad::Shape{oc, c, 3, 3}, ad::Shape{oc}};
        p.differentiable = {true, true, true};
        p.build = [factor](ad::Tape&, const std::vector<ad::Var>& xs) {
            return ad::upconv2d(xs[0], xs[1], xs[2], factor);
        };
        return p;
    }));

    out.push_back(check_op("upsample_nearest", n_shapes, seed, [](rng::Rng& r) {
        const int n = r.uniform_int(1, 2), c = r.uniform_int(1, 3);
        const int h = r.uniform_int(2, 6), w = r.uniform_int(2, 6);
        const int oh = r.uniform_int(2, 9), ow = r.uniform_int(2, 9);
        Problem p;
        p.shapes = {ad::Shape{n, c, h, w}};
        p.differentiable = {true};
        p.build = [oh, ow](ad::Tape&, const std::vector<ad::Var>& xs) {
            return ad::upsample_nearest(xs[0], oh, ow);
        };
        return p;
    }));

    out.push_back(check_op("relu", n_shapes, seed, [](rng::Rng& r) {
        Problem p;
        p.shapes = {ad::Shape{r.uniform_int(1, 3), r.uniform_int(1, 8)}};
        p.differentiable = {true};
        p.build = [](ad::Tape&, const std::vector<ad::Var>& xs) { return ad::relu(xs[0]); };
        return p;
    }));

    out.push_back(check_op("sigmoid", n_shapes, seed, [](rng::Rng& r) {
        Problem p;
        p.shapes = {ad::Shape{r.uniform_int(1, 3), r.uniform_int(1, 8)}};
        p.differentiable = {true};
        p.build = [](ad::Tape&, const std::vector<ad::Var>& xs) { return ad::sigmoid(xs[0]); };
        return p;
    }));

    out.push_back(check_op("mse_loss", n_shapes, seed, [](rng::Rng& r) {
        const ad::Shape s{r.uniform_int(1, 3), r.uniform_int(1, 8)};
        Problem p;
        p.shapes = {s, s};
        p.differentiable = {true, true};
        p.build = [](ad::Tape&, const std::vector<ad::Var>& xs) {
            return ad::mse_loss(xs[0], xs[1]);
        };
        return p;
    }));

    out.push_back(check_op("bce_loss", n_shapes, seed, [](rng::Rng& r) {
        const ad::Shape s{r.uniform_int(1, 4), 1};
        Problem p;
        p.shapes = {s, s};
        p.differentiable = {true, false};  // labels are class targets, not inputs
        p.build = [](ad::Tape&, const std::vector<ad::Var>& xs) {
            return ad::bce_loss(xs[0], xs[1]);
        };
        return p;
    }));

    out.push_back(check_op("grad_reverse", n_shapes, seed, [](rng::Rng& r) {
        const double lambda = r.uniform(0.25, 2.0);
        Problem p;
        p.shapes = {ad::Shape{r.uniform_int(1, 3), r.uniform_int(1, 8)}};
        p.differentiable = {true};
        p.backward_scale = -lambda;  // backward contract: -lambda x forward Jacobian
        p.build = [lambda](ad::Tape&, const std::vector<ad::Var>& xs) {
            return ad::grad_reverse(xs[0], lambda);
        };
        return p;
    }));

    out.push_back(check_op("et_forward", n_shapes, seed, [](rng::Rng& r) {
        const int n = r.uniform_int(1, 2), c = 2, h = 8, w = 8;
        const geom::GridSpec grid{w, h, {-0.96, -0.96}, 0.24};
        std::vector<geom::Pose2D> poses;
        for (int i = 0; i < n; ++i)
            poses.push_back(geom::Pose2D::make(r.uniform(-0.5, 0.5), r.uniform(-0.5, 0.5),
                                               r.uniform(-M_PI, M_PI)));
        Problem p;
        p.shapes = {ad::Shape{n, c, h, w}};
        p.differentiable = {true};
        p.build = [poses, grid](ad::Tape&, const std::vector<ad::Var>& xs) {
            return et::et_warp(xs[0], poses, grid);
        };
        return p;
    }));

    out.push_back(check_op("concat_channels", n_shapes, seed, [](rng::Rng& r) {
        const int n = r.uniform_int(1, 2), h = r.uniform_int(2, 4), w = r.uniform_int(2, 4);
        Problem p;
        p.shapes = {ad::Shape{n, r.uniform_int(1, 3), h, w}, ad::Shape{n, r.uniform_int(1, 3), h, w}};
        p.differentiable = {true, true};
        p.build = [](ad::Tape&, const std::vector<ad::Var>& xs) {
            return ad::concat_channels({xs[0], xs[1]});
        };
        return p;
    }));

    out.push_back(check_op("broadcast_spatial", n_shapes, seed, [](rng::Rng& r) {
        const int h = r.uniform_int(2, 5), w = r.uniform_int(2, 5);
        Problem p;
        p.shapes = {ad::Shape{r.uniform_int(1, 3), r.uniform_int(1, 4)}};
        p.differentiable = {true};
        p.build = [h, w](ad::Tape&, const std::vector<ad::Var>& xs) {
            return ad::broadcast_spatial(xs[0], h, w);
        };
        return p;
    }));

    return out;
}

inline bool all_pass(const std::vector<OpReport>& reports) {
    for (const auto& r : reports)
        if (!r.pass) return false;
    return true;
}

}  // namespace ssl2d::gradcheck
