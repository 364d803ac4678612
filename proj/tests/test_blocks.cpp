#include <catch2/catch_amalgamated.hpp>

#include <stiv/blocks.hpp>

#include "test_util.hpp"

using namespace stiv;

namespace {

Tensor64 rope_at_1d(const Tensor64& v, const RopeTable& table, double pos) {
    std::vector<double> cs, sn;
    table.build_1d<double>({pos}, cs, sn);
    return rope_apply(reshape(v, {1, v.numel()}), cs, sn, 1);
}

Tensor64 rope_at_2d(const Tensor64& v, const RopeTable& table, double row, double col) {
    std::vector<double> cs, sn;
    table.build_2d<double>({{row, col}}, cs, sn);
    return rope_apply(reshape(v, {1, v.numel()}), cs, sn, 1);
}

double dot(const Tensor64& a, const Tensor64& b) {
    double acc = 0;
    for (size_t i = 0; i < a.data().size(); ++i) acc += a.data()[i] * b.data()[i];
    return acc;
}

double norm(const std::vector<double>& v) {
    double acc = 0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

}  // namespace

TEST_CASE("rms_norm on constant, zero and random vectors") {
    int64_t d = 16;
    auto gain = Tensor64::ones({d});

    auto c = rms_norm(Tensor64::full({d}, 3.0), gain);
    for (double v : c.data()) REQUIRE(v == Catch::Approx(1.0 / std::sqrt(1.0 + kNormEps / 9.0)));
    auto cneg = rms_norm(Tensor64::full({d}, -3.0), gain);
    for (double v : cneg.data()) REQUIRE(v < 0);

    auto z = rms_norm(Tensor64::zeros({d}), gain);
    for (double v : z.data()) REQUIRE(v == 0.0);

    RngState rng{11, 0};
    auto x = Tensor64::gaussian(rng, {d});
    auto y = rms_norm(x, gain);
    REQUIRE(norm(y.data()) * norm(y.data()) == Catch::Approx(double(d)).margin(1e-4 * d));
}

TEST_CASE("rms_norm gradient") {
    RngState rng{12, 0};
    auto x = Tensor64::gaussian(rng, {3, 8});
    auto g = Tensor64::gaussian(rng, {8});
    auto make_loss = [&]() {
        auto y = rms_norm(x, g, 2);
        return sum_all(mul(y, y));
    };
    RngState pick{3, 0};
    REQUIRE(stiv_test::gradcheck_max_rel_err<double>(make_loss, {x, g}, pick) < 1e-6);
}

TEST_CASE("stateless layer norm analytic cases and moments") {
    auto a = stateless_layer_norm(Tensor64::from_data({2}, {1, 1}));
    REQUIRE(std::abs(a.data()[0]) < 1e-9);
    REQUIRE(std::abs(a.data()[1]) < 1e-9);

    auto b = stateless_layer_norm(Tensor64::from_data({2}, {0, 2}));
    REQUIRE(b.data()[0] == Catch::Approx(-1.0).margin(1e-5));
    REQUIRE(b.data()[1] == Catch::Approx(1.0).margin(1e-5));

    RngState rng{13, 0};
    auto y = stateless_layer_norm(Tensor64::gaussian(rng, {4, 256}));
    for (int r = 0; r < 4; ++r) {
        double mean = 0, var = 0;
        for (int j = 0; j < 256; ++j) mean += y.data()[r * 256 + j];
        mean /= 256;
        for (int j = 0; j < 256; ++j) var += (y.data()[r * 256 + j] - mean) * (y.data()[r * 256 + j] - mean);
        var /= 256;
        REQUIRE(std::abs(mean) < 1e-6);
        REQUIRE(std::abs(var - 1.0) < 1e-5);
    }
}

TEST_CASE("rope at position 0 is identity and all rotations are isometries") {
    RngState rng{14, 0};
    RopeTable t1(RopeKind::temporal_1d, 16);
    RopeTable t2(RopeKind::spatial_2d, 16);
    auto v = Tensor64::gaussian(rng, {16});
    auto r0 = rope_at_1d(v, t1, 0.0);
    for (int i = 0; i < 16; ++i) REQUIRE(r0.data()[i] == Catch::Approx(v.data()[i]).margin(1e-12));
    auto r00 = rope_at_2d(v, t2, 0.0, 0.0);
    for (int i = 0; i < 16; ++i) REQUIRE(r00.data()[i] == Catch::Approx(v.data()[i]).margin(1e-12));

    for (int trial = 0; trial < 20; ++trial) {
        auto w = Tensor64::gaussian(rng, {16});
        double pos = rng_uniform(rng) * 100;
        REQUIRE(norm(rope_at_1d(w, t1, pos).data()) == Catch::Approx(norm(w.data())).margin(1e-6));
        REQUIRE(norm(rope_at_2d(w, t2, pos, pos * 0.5).data()) == Catch::Approx(norm(w.data())).margin(1e-6));
    }
}

TEST_CASE("rope relative-position identity, 1D and 2D, 100 trials") {
    RngState rng{15, 0};
    RopeTable t1(RopeKind::temporal_1d, 16);
    RopeTable t2(RopeKind::spatial_2d, 16);
    for (int trial = 0; trial < 100; ++trial) {
        auto q = Tensor64::gaussian(rng, {16});
        auto k = Tensor64::gaussian(rng, {16});
        double m = std::floor(rng_uniform(rng) * 20);
        double n = std::floor(rng_uniform(rng) * 20);
        double shift = std::floor(rng_uniform(rng) * 20);
        double d0 = dot(rope_at_1d(q, t1, m), rope_at_1d(k, t1, n));
        double d1 = dot(rope_at_1d(q, t1, m + shift), rope_at_1d(k, t1, n + shift));
        REQUIRE(d0 == Catch::Approx(d1).margin(1e-5 * (1 + std::abs(d0))));

        double dr = std::floor(rng_uniform(rng) * 10), dc = std::floor(rng_uniform(rng) * 10);
        double e0 = dot(rope_at_2d(q, t2, m, n), rope_at_2d(k, t2, n, m));
        double e1 = dot(rope_at_2d(q, t2, m + dr, n + dc), rope_at_2d(k, t2, n + dr, m + dc));
        REQUIRE(e0 == Catch::Approx(e1).margin(1e-5 * (1 + std::abs(e0))));
    }
}

TEST_CASE("position_scale 1 is the identity schedule") {
    RngState rng{16, 0};
    RopeTable base(RopeKind::temporal_1d, 8, 10000.0, 1.0);
    RopeTable half(RopeKind::temporal_1d, 8, 10000.0, 0.5);
    auto v = Tensor64::gaussian(rng, {8});
    // scaled positions: rotating at pos 10 with scale .5 == pos 5 with scale 1
    auto a = rope_at_1d(v, half, 10.0);
    auto b = rope_at_1d(v, base, 5.0);
    for (int i = 0; i < 8; ++i) REQUIRE(a.data()[i] == Catch::Approx(b.data()[i]).margin(1e-12));
}

TEST_CASE("single-token self-attention reduces to out_proj(v_proj(x))") {
    RngState rng{17, 0};
    auto p = AttentionParams<double>::init(rng, 8, 2);
    auto x = Tensor64::gaussian(rng, {1, 1, 8});
    auto y = attention(x, x, p);
    auto expected = add(matmul(add(matmul(x, p.wv), p.bv), p.wo), p.bo);
    for (size_t i = 0; i < y.data().size(); ++i)
        REQUIRE(y.data()[i] == Catch::Approx(expected.data()[i]).margin(1e-12));
}

TEST_CASE("causal attention: position 0 attends only to itself") {
    RngState rng{18, 0};
    auto p = AttentionParams<double>::init(rng, 8, 2, -1, /*causal=*/true);
    auto x = Tensor64::gaussian(rng, {1, 3, 8});
    auto y1 = attention(x, x, p);
    // perturb tokens 1 and 2; token 0's output must not move
    auto x2 = x.detach();
    for (int j = 8; j < 24; ++j) x2.data()[j] += 1.0;
    auto y2 = attention(x2, x2, p);
    for (int j = 0; j < 8; ++j) REQUIRE(y1.data()[j] == Catch::Approx(y2.data()[j]).margin(1e-12));
    // and token 2 sees everything
    bool moved = false;
    for (int j = 16; j < 24; ++j) moved = moved || std::abs(y1.data()[j] - y2.data()[j]) > 1e-9;
    REQUIRE(moved);
}

TEST_CASE("attention matches a per-head loop oracle") {
    RngState rng{19, 0};
    const int64_t D = 8, H = 2, hd = 4, N = 4;
    auto p = AttentionParams<double>::init(rng, D, H);
    auto x = Tensor64::gaussian(rng, {1, N, D});
    auto y = attention(x, x, p);

    // independent oracle: explicit loops in double
    auto proj = [&](const TensorBase<double>& w, const TensorBase<double>& b, int64_t n, int64_t in_d) {
        std::vector<double> out(n * D, 0.0);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t o = 0; o < D; ++o) {
                double acc = b.data()[o];
                for (int64_t c = 0; c < in_d; ++c) acc += x.data()[i * in_d + c] * w.data()[c * D + o];
                out[i * D + o] = acc;
            }
        return out;
    };
    auto q = proj(p.wq, p.bq, N, D), k = proj(p.wk, p.bk, N, D), v = proj(p.wv, p.bv, N, D);
    auto headnorm = [&](std::vector<double>& m, const TensorBase<double>& gain) {
        for (int64_t i = 0; i < N; ++i)
            for (int64_t h = 0; h < H; ++h) {
                double ms = 0;
                for (int64_t j = 0; j < hd; ++j) ms += m[i * D + h * hd + j] * m[i * D + h * hd + j];
                double iv = 1.0 / std::sqrt(ms / hd + kNormEps);
                for (int64_t j = 0; j < hd; ++j) m[i * D + h * hd + j] *= iv * gain.data()[h * hd + j];
            }
    };
    headnorm(q, p.q_gain);
    headnorm(k, p.k_gain);
    std::vector<double> ctx(N * D, 0.0);
    for (int64_t h = 0; h < H; ++h)
        for (int64_t i = 0; i < N; ++i) {
            std::vector<double> logits(N);
            for (int64_t j = 0; j < N; ++j) {
                double acc = 0;
                for (int64_t c = 0; c < hd; ++c) acc += q[i * D + h * hd + c] * k[j * D + h * hd + c];
                logits[j] = acc / std::sqrt(double(hd));
            }
            double mx = *std::max_element(logits.begin(), logits.end()), z = 0;
            for (auto& l : logits) z += (l = std::exp(l - mx));
            for (int64_t j = 0; j < N; ++j)
                for (int64_t c = 0; c < hd; ++c) ctx[i * D + h * hd + c] += logits[j] / z * v[j * D + h * hd + c];
        }
    for (int64_t i = 0; i < N; ++i)
        for (int64_t o = 0; o < D; ++o) {
            double acc = p.bo.data()[o];
            for (int64_t c = 0; c < D; ++c) acc += ctx[i * D + c] * p.wo.data()[c * D + o];
            REQUIRE(y.data()[i * D + o] == Catch::Approx(acc).margin(1e-5));
        }
}

TEST_CASE("qk-norm keeps logits finite for inputs scaled by 1e6") {
    RngState rng{20, 0};
    auto p = AttentionParams<double>::init(rng, 8, 2);
    auto x = Tensor64::gaussian(rng, {1, 4, 8});
    for (auto& v : x.data()) v *= 1e6;
    REQUIRE_NOTHROW(attention(x, x, p));  // finite checks run inside every op
}

TEST_CASE("sandwich sublayer identities and gate gradient") {
    RngState rng{21, 0};
    const int64_t D = 8;
    auto sw = SandwichParams<double>::init(D);
    auto x = Tensor64::gaussian(rng, {3, D});
    auto identity_inner = [](const TensorBase<double>& h) { return h; };

    auto zero_gate = Modulation<double>::of(Tensor64::ones({D}), Tensor64::zeros({D}), Tensor64::zeros({D}));
    auto y0 = sandwich_sublayer<double>(x, sw, zero_gate, identity_inner);
    REQUIRE(y0.data() == x.data());

    auto unit = Modulation<double>::of(Tensor64::ones({D}), Tensor64::zeros({D}), Tensor64::ones({D}));
    auto y1 = sandwich_sublayer<double>(x, sw, unit, identity_inner);
    auto expected = add(x, stateless_layer_norm(stateless_layer_norm(x)));
    for (size_t i = 0; i < y1.data().size(); ++i)
        REQUIRE(y1.data()[i] == Catch::Approx(expected.data()[i]).margin(1e-9));

    auto gate = Tensor64::gaussian(rng, {D});
    auto ffn = FfnParams<double>::init(rng, D);
    auto make_loss = [&]() {
        auto mod = Modulation<double>::of(Tensor64::ones({D}), Tensor64::zeros({D}), gate);
        auto y = sandwich_sublayer<double>(x, sw, mod, [&](const TensorBase<double>& h) { return ffn.forward(h); });
        return sum_all(mul(y, y));
    };
    RngState pick{5, 0};
    REQUIRE(stiv_test::gradcheck_max_rel_err<double>(make_loss, {gate}, pick) < 1e-3);
}

namespace {

struct SpatioTemporalFixture {
    RopeTable spatial{RopeKind::spatial_2d, 4};
    RopeTable temporal{RopeKind::temporal_1d, 4};
    std::vector<double> scos, ssin, tcos, tsin;
    AttentionParams<double> sp, tp;
    int64_t T, Ssites, D = 8, grid;

    SpatioTemporalFixture(RngState& rng, int64_t T_, int64_t grid_) : T(T_), grid(grid_) {
        Ssites = grid * grid;
        std::vector<std::pair<double, double>> pos2d;
        for (int64_t r = 0; r < grid; ++r)
            for (int64_t c = 0; c < grid; ++c) pos2d.push_back({double(r), double(c)});
        spatial.build_2d<double>(pos2d, scos, ssin);
        std::vector<double> pos1d(T);
        for (int64_t t = 0; t < T; ++t) pos1d[t] = double(t);
        temporal.build_1d<double>(pos1d, tcos, tsin);
        sp = AttentionParams<double>::init(rng, D, 2);
        tp = AttentionParams<double>::init(rng, D, 2);
    }
};

}  // namespace

TEST_CASE("spatial attention never mixes frames; matches per-frame oracle") {
    RngState rng{22, 0};
    SpatioTemporalFixture f(rng, 3, 2);
    auto x = Tensor64::gaussian(rng, {f.T, f.Ssites, f.D});
    auto y = spatial_attention(x, f.sp, f.scos, f.ssin);

    // same frame content in a different clip gives identical frame output
    auto x2 = x.detach();
    for (int64_t i = f.Ssites * f.D; i < x2.numel(); ++i) x2.data()[i] += 0.7;  // frames 1,2 changed
    auto y2 = spatial_attention(x2, f.sp, f.scos, f.ssin);
    for (int64_t i = 0; i < f.Ssites * f.D; ++i)
        REQUIRE(y.data()[i] == Catch::Approx(y2.data()[i]).margin(1e-12));

    // per-frame loop oracle
    for (int64_t t = 0; t < f.T; ++t) {
        auto frame = index_select(x, 0, {t});
        auto yf = attention(frame, frame, f.sp, &f.scos, &f.ssin);
        for (int64_t i = 0; i < f.Ssites * f.D; ++i)
            REQUIRE(y.data()[t * f.Ssites * f.D + i] == Catch::Approx(yf.data()[i]).margin(1e-5));
    }

    // T=1 equals plain image attention
    auto img = Tensor64::gaussian(rng, {1, f.Ssites, f.D});
    auto ys = spatial_attention(img, f.sp, f.scos, f.ssin);
    auto ya = attention(img, img, f.sp, &f.scos, &f.ssin);
    REQUIRE(ys.data() == ya.data());
}

TEST_CASE("temporal attention never mixes sites; degenerate and causal cases") {
    RngState rng{23, 0};
    SpatioTemporalFixture f(rng, 4, 2);
    auto x = Tensor64::gaussian(rng, {f.T, f.Ssites, f.D});
    auto y = temporal_attention(x, f.tp, f.tcos, f.tsin);

    // perturb all sites except site 0 across all frames; site 0 output fixed
    auto x2 = x.detach();
    for (int64_t t = 0; t < f.T; ++t)
        for (int64_t s = 1; s < f.Ssites; ++s)
            for (int64_t c = 0; c < f.D; ++c) x2.data()[(t * f.Ssites + s) * f.D + c] += 0.3;
    auto y2 = temporal_attention(x2, f.tp, f.tcos, f.tsin);
    for (int64_t t = 0; t < f.T; ++t)
        for (int64_t c = 0; c < f.D; ++c)
            REQUIRE(y.data()[t * f.Ssites * f.D + c] == Catch::Approx(y2.data()[t * f.Ssites * f.D + c]).margin(1e-12));

    // T=1: degenerate softmax -> out_proj(v_proj(.))
    std::vector<double> tc1, ts1;
    f.temporal.build_1d<double>({0.0}, tc1, ts1);
    auto one = Tensor64::gaussian(rng, {1, f.Ssites, f.D});
    auto yd = temporal_attention(one, f.tp, tc1, ts1);
    auto expected = add(matmul(add(matmul(one, f.tp.wv), f.tp.bv), f.tp.wo), f.tp.bo);
    for (size_t i = 0; i < yd.data().size(); ++i)
        REQUIRE(yd.data()[i] == Catch::Approx(expected.data()[i]).margin(1e-9));

    // causal: perturbing frame t+1 leaves frames <= t unchanged
    RngState rng2{24, 0};
    auto cp = AttentionParams<double>::init(rng2, f.D, 2, -1, /*causal=*/true);
    auto yc1 = temporal_attention(x, cp, f.tcos, f.tsin);
    auto x3 = x.detach();
    for (int64_t s = 0; s < f.Ssites; ++s)
        for (int64_t c = 0; c < f.D; ++c) x3.data()[(2 * f.Ssites + s) * f.D + c] += 1.0;  // frame 2
    auto yc2 = temporal_attention(x3, cp, f.tcos, f.tsin);
    for (int64_t t = 0; t < 2; ++t)
        for (int64_t i = 0; i < f.Ssites * f.D; ++i)
            REQUIRE(yc1.data()[t * f.Ssites * f.D + i] ==
                    Catch::Approx(yc2.data()[t * f.Ssites * f.D + i]).margin(1e-12));
}

TEST_CASE("one spatial+temporal pair moves information only along row and column") {
    RngState rng{25, 0};
    SpatioTemporalFixture f(rng, 3, 2);
    auto run = [&](const Tensor64& x) {
        auto y = add(x, spatial_attention(x, f.sp, f.scos, f.ssin));
        return add(y, temporal_attention(y, f.tp, f.tcos, f.tsin));
    };
    auto x = Tensor64::gaussian(rng, {f.T, f.Ssites, f.D});
    auto y1 = run(x);
    int64_t pt = 1, ps = 2;  // perturbed token
    auto x2 = x.detach();
    for (int64_t c = 0; c < f.D; ++c) x2.data()[(pt * f.Ssites + ps) * f.D + c] += 0.5;
    auto y2 = run(x2);
    // Direct influence lands on row pt (spatial hop) and the columns fed by it
    // (temporal hop); any change outside row pt and column ps needs two hops
    // and must be far smaller than the in-row/in-column change.
    double direct = 0, diagonal = 0;
    for (int64_t t = 0; t < f.T; ++t)
        for (int64_t s = 0; s < f.Ssites; ++s)
            for (int64_t c = 0; c < f.D; ++c) {
                double d = std::abs(y1.data()[(t * f.Ssites + s) * f.D + c] -
                                    y2.data()[(t * f.Ssites + s) * f.D + c]);
                if (t == pt || s == ps)
                    direct = std::max(direct, d);
                else
                    diagonal = std::max(diagonal, d);
            }
    REQUIRE(direct > 0);
    REQUIRE(diagonal < 1e-2 * direct);

    // a single spatial or temporal attention is exactly confined
    auto ys1 = spatial_attention(x, f.sp, f.scos, f.ssin);
    auto ys2 = spatial_attention(x2, f.sp, f.scos, f.ssin);
    for (int64_t t = 0; t < f.T; ++t) {
        if (t == pt) continue;
        for (int64_t i = 0; i < f.Ssites * f.D; ++i)
            REQUIRE(ys1.data()[t * f.Ssites * f.D + i] == ys2.data()[t * f.Ssites * f.D + i]);
    }
    auto yt1 = temporal_attention(x, f.tp, f.tcos, f.tsin);
    auto yt2 = temporal_attention(x2, f.tp, f.tcos, f.tsin);
    for (int64_t t = 0; t < f.T; ++t)
        for (int64_t s = 0; s < f.Ssites; ++s) {
            if (s == ps) continue;
            for (int64_t c = 0; c < f.D; ++c)
                REQUIRE(yt1.data()[(t * f.Ssites + s) * f.D + c] == yt2.data()[(t * f.Ssites + s) * f.D + c]);
        }
}

TEST_CASE("cross attention with zero-init output projection is a no-op; duplicates are invariant") {
    RngState rng{26, 0};
    const int64_t D = 8, Dt = 6;
    auto block = StivBlock<double>::init(rng, D, 2, Dt, true, false);
    auto x = Tensor64::gaussian(rng, {1, 4, D});

    // zero-initialized wo => attention output is exactly the zero bias
    auto text1 = Tensor64::gaussian(rng, {1, 1, Dt});
    auto y = attention(x, text1, block.cross_attn);
    for (double v : y.data()) REQUIRE(v == 0.0);

    // after giving wo real values, duplicating a text token changes nothing
    RngState rng2{27, 0};
    auto p = block.cross_attn;
    p.wo = linear_weight<double>(rng2, D, D);
    auto tok = Tensor64::gaussian(rng2, {Dt});
    auto one = reshape(tok, {1, 1, Dt});
    auto two = Tensor64::zeros({1, 2, Dt});
    for (int i = 0; i < Dt; ++i) {
        two.data()[i] = tok.data()[i];
        two.data()[Dt + i] = tok.data()[i];
    }
    auto ya = attention(x, one, p);
    auto yb = attention(x, two, p);
    for (size_t i = 0; i < ya.data().size(); ++i)
        REQUIRE(ya.data()[i] == Catch::Approx(yb.data()[i]).margin(1e-6));
}
