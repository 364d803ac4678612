#include <catch2/catch_amalgamated.hpp>

#include <stiv/conditioning.hpp>
#include <stiv/flow.hpp>

using namespace stiv;

namespace {

VideoLatentT<double> random_latent(uint64_t seed, int64_t T = 8) {
    RngState rng{seed, 0};
    return {Tensor64::gaussian(rng, {T, 4, 4, 2}), MicroConditions{8, 8, 0, 0, 1, T}};
}

ImageConditionT<double> condition_frames(const VideoLatentT<double>& clean, const std::vector<int64_t>& idx) {
    return {index_select(clean.data, 0, idx).detach(), idx};
}

}  // namespace

TEST_CASE("pinned frame sets per task mode") {
    REQUIRE(TaskMode{TaskKind::t2v}.pinned_frames(8).empty());
    REQUIRE(TaskMode{TaskKind::ti2v}.pinned_frames(8) == std::vector<int64_t>{0});
    REQUIRE(TaskMode{TaskKind::predict4}.pinned_frames(8) == std::vector<int64_t>{0, 1, 2, 3});
    REQUIRE(TaskMode{TaskKind::interpolate}.pinned_frames(8) == std::vector<int64_t>{0, 7});
    REQUIRE(TaskMode{TaskKind::keyframe}.pinned_frames(8).empty());
    REQUIRE(TaskMode{TaskKind::keyframe}.sampling_stride() == 20);
    REQUIRE(TaskMode{TaskKind::ti2v}.sampling_stride() == 1);

    // all frames pinned would leave an empty loss; rejected instead
    REQUIRE_THROWS_AS(TaskMode{TaskKind::predict4}.pinned_frames(4), std::invalid_argument);
    REQUIRE_THROWS_AS(TaskMode{TaskKind::interpolate}.pinned_frames(2), std::invalid_argument);
}

TEST_CASE("frame replacement pins exactly and masks the loss") {
    auto clean = random_latent(1);
    auto x_t = random_latent(2);
    auto img = condition_frames(clean, {0});
    auto [replaced, mask] = apply_frame_replacement(x_t, std::optional{img}, TaskMode{TaskKind::ti2v});

    int64_t frame_elems = 4 * 4 * 2;
    for (int64_t i = 0; i < frame_elems; ++i)
        REQUIRE(replaced.data.data()[static_cast<size_t>(i)] == clean.data.data()[static_cast<size_t>(i)]);
    for (size_t i = static_cast<size_t>(frame_elems); i < x_t.data.data().size(); ++i)
        REQUIRE(replaced.data.data()[i] == x_t.data.data()[i]);
    REQUIRE(mask.include == std::vector<bool>{false, true, true, true, true, true, true, true});

    auto [r2, m2] = apply_frame_replacement(x_t, std::optional{img}, TaskMode{TaskKind::ti2v},
                                            /*first_frame_loss=*/true);
    REQUIRE(m2.include == std::vector<bool>(8, true));
}

TEST_CASE("t2v leaves the state untouched and rejects stray image conditions") {
    auto x_t = random_latent(3);
    auto [same, mask] = apply_frame_replacement(x_t, std::optional<ImageConditionT<double>>{}, TaskMode{TaskKind::t2v});
    REQUIRE(same.data.data() == x_t.data.data());
    REQUIRE(mask.include == std::vector<bool>(8, true));

    auto img = condition_frames(random_latent(4), {0});
    REQUIRE_THROWS_AS(apply_frame_replacement(x_t, std::optional{img}, TaskMode{TaskKind::t2v}),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(apply_frame_replacement(x_t, std::optional<ImageConditionT<double>>{}, TaskMode{TaskKind::ti2v}),
                      std::invalid_argument);
}

TEST_CASE("interpolation pins both ends; predict4 pins the first four") {
    auto clean = random_latent(5);
    auto x_t = random_latent(6);
    auto imgI = condition_frames(clean, {0, 7});
    auto [ri, mi] = apply_frame_replacement(x_t, std::optional{imgI}, TaskMode{TaskKind::interpolate});
    REQUIRE(mi.include == std::vector<bool>{false, true, true, true, true, true, true, false});
    int64_t fe = 4 * 4 * 2;
    for (int64_t i = 0; i < fe; ++i) {
        REQUIRE(ri.data.data()[static_cast<size_t>(i)] == clean.data.data()[static_cast<size_t>(i)]);
        REQUIRE(ri.data.data()[static_cast<size_t>(7 * fe + i)] == clean.data.data()[static_cast<size_t>(7 * fe + i)]);
    }

    auto imgP = condition_frames(clean, {0, 1, 2, 3});
    auto [rp, mp] = apply_frame_replacement(x_t, std::optional{imgP}, TaskMode{TaskKind::predict4});
    REQUIRE(mp.included_count() == 4);
    for (int64_t i = 0; i < 4 * fe; ++i)
        REQUIRE(rp.data.data()[static_cast<size_t>(i)] == clean.data.data()[static_cast<size_t>(i)]);
}

TEST_CASE("mismatched image conditions are rejected") {
    auto clean = random_latent(7);
    auto x_t = random_latent(8);
    auto wrong_idx = condition_frames(clean, {1});
    REQUIRE_THROWS_AS(apply_frame_replacement(x_t, std::optional{wrong_idx}, TaskMode{TaskKind::ti2v}),
                      std::invalid_argument);
    ImageConditionT<double> wrong_count{index_select(clean.data, 0, {0, 1}).detach(), {0}};
    REQUIRE_THROWS_AS(apply_frame_replacement(x_t, std::optional{wrong_count}, TaskMode{TaskKind::ti2v}),
                      std::invalid_argument);
    RngState rng{9, 0};
    ImageConditionT<double> wrong_shape{Tensor64::gaussian(rng, {1, 2, 2, 2}), {0}};
    REQUIRE_THROWS_AS(apply_frame_replacement(x_t, std::optional{wrong_shape}, TaskMode{TaskKind::ti2v}),
                      std::invalid_argument);
}

TEST_CASE("pin_state is idempotent and the identity for t2v") {
    auto clean = random_latent(10);
    auto x = random_latent(11);
    auto img = condition_frames(clean, {0});
    auto once = pin_state(x, std::optional{img}, TaskMode{TaskKind::ti2v});
    auto twice = pin_state(once, std::optional{img}, TaskMode{TaskKind::ti2v});
    REQUIRE(once.data.data() == twice.data.data());

    auto same = pin_state(x, std::optional<ImageConditionT<double>>{}, TaskMode{TaskKind::t2v});
    REQUIRE(same.data.data() == x.data.data());
}

TEST_CASE("condition dropout rates") {
    ConditionT<double> full{tokenize("a red square moving right speed 1"),
                            condition_frames(random_latent(12), {0})};
    RngState rng{13, 0};
    auto kept = sample_training_condition(rng, full, 0.0, 0.0);
    REQUIRE(kept.text_tokens.has_value());
    REQUIRE(kept.image.has_value());
    auto dropped = sample_training_condition(rng, full, 1.0, 1.0);
    REQUIRE(!dropped.text_tokens.has_value());
    REQUIRE(!dropped.image.has_value());

    int text_drops = 0, image_drops = 0;
    const int n = 100000;
    RngState mc{14, 0};
    for (int i = 0; i < n; ++i) {
        auto c = sample_training_condition(mc, full, 0.10, 0.08);
        if (!c.text_tokens) ++text_drops;
        if (!c.image) ++image_drops;
    }
    REQUIRE(std::abs(text_drops / double(n) - 0.10) < 0.01);
    REQUIRE(std::abs(image_drops / double(n) - 0.08) < 0.01);
}

TEST_CASE("pinned frames contribute exactly zero loss gradient") {
    RngState rng{15, 0};
    auto pred = Tensor64::gaussian(rng, {4, 3, 3, 2}).set_requires_grad();
    auto target = Tensor64::gaussian(rng, {4, 3, 3, 2});
    LossMask mask{{false, true, true, false}};
    auto g = grad(fm_loss(pred, target, mask), {pred});
    int64_t fe = 3 * 3 * 2;
    for (int64_t f = 0; f < 4; ++f)
        for (int64_t i = 0; i < fe; ++i) {
            double v = g[0].data()[static_cast<size_t>(f * fe + i)];
            if (f == 0 || f == 3) REQUIRE(v == 0.0);
            else REQUIRE(v != 0.0);
        }
}
