#pragma once

#include "checkpoint.hpp"
#include "flow.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

// Run configuration: UTF-8 JSON, strict. Every section rejects keys it does
// not know, naming the offending key, so typos fail loudly instead of
// silently training with a default.

namespace stiv {

struct DatasetConfig {
    int64_t frames = 8;
    int64_t height = 32;
    int64_t width = 32;
};

struct RunConfig {
    StivConfig model;
    TrainConfig training;
    int64_t steps = 500;
    int64_t batch_size = 4;
    int64_t checkpoint_every = 0;  // 0 = final checkpoint only
    GuidanceConfig guidance;
    SamplerConfig sampler;
    DatasetConfig dataset;
    uint64_t seed = 0;
};

namespace config_detail {

// Pulls known keys out of a JSON object and then verifies nothing is left.
class StrictObject {
  public:
    StrictObject(const nlohmann::json& j, std::string section) : j_(j), section_(std::move(section)) {
        if (!j.is_object())
            throw std::runtime_error("config: section '" + section_ + "' must be a JSON object");
    }

    template <class T>
    void get(const char* key, T& out) {
        auto it = j_.find(key);
        if (it != j_.end()) {
            try {
                out = it->get<T>();
            } catch (const nlohmann::json::exception&) {
                throw std::runtime_error("config: bad value for key '" + qualified(key) + "'");
            }
        }
        seen_.insert(key);
    }

    void get_string(const char* key, std::string& out) { get<std::string>(key, out); }

    const nlohmann::json* sub(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw std::runtime_error("config: unknown key '" + qualified(it.key()) + "'");
    }

  private:
    std::string qualified(const std::string& key) const {
        return section_.empty() ? key : section_ + "." + key;
    }

    const nlohmann::json& j_;
    std::string section_;
    std::set<std::string> seen_;
};

inline StivConfig parse_model(const nlohmann::json& j) {
    StrictObject o(j, "model");
    StivConfig c;
    o.get("n_blocks", c.n_blocks);
    o.get("hidden_dim", c.hidden_dim);
    o.get("n_heads", c.n_heads);
    o.get("spatial_patch", c.spatial_patch);
    o.get("temporal_patch", c.temporal_patch);
    o.get("mask_ratio", c.mask_ratio);
    std::string axis = c.mask_axis == MaskAxis::spatial ? "spatial" : "temporal";
    o.get_string("mask_axis", axis);
    if (axis == "spatial") c.mask_axis = MaskAxis::spatial;
    else if (axis == "temporal") c.mask_axis = MaskAxis::temporal;
    else throw std::runtime_error("config: bad value for key 'model.mask_axis'");
    o.get("n_decoder_blocks", c.n_decoder_blocks);
    o.get("causal_temporal", c.causal_temporal);
    o.get("first_frame_loss", c.first_frame_loss);
    o.get("text_dropout_p", c.text_dropout_p);
    o.get("image_dropout_p", c.image_dropout_p);
    o.get("temporal_blocks", c.temporal_blocks);
    o.get("latent_channels", c.latent_channels);
    o.get("text_dim", c.text_dim);
    o.get("vocab_size", c.vocab_size);
    o.get("ffn_expansion", c.ffn_expansion);
    o.get("spatial_pos_scale", c.spatial_pos_scale);
    o.get("temporal_pos_scale", c.temporal_pos_scale);
    o.finish();
    c.validate();
    return c;
}

inline OptimizerConfig parse_optimizer(const nlohmann::json& j) {
    StrictObject o(j, "training.optimizer");
    OptimizerConfig c;
    std::string kind = "adafactor";
    o.get_string("kind", kind);
    if (kind == "adafactor") c.kind = OptimizerKind::adafactor;
    else if (kind == "adamw") c.kind = OptimizerKind::adamw;
    else throw std::runtime_error("config: bad value for key 'training.optimizer.kind'");
    o.get("beta1", c.beta1);
    o.get("beta2", c.beta2);
    o.get("max_lr", c.max_lr);
    o.get("warmup_steps", c.warmup_steps);
    o.get("decay_steps", c.decay_steps);
    o.get("weight_decay", c.weight_decay);
    o.get("eps1", c.eps1);
    o.get("clip_threshold", c.clip_threshold);
    o.get("adam_eps", c.adam_eps);
    o.finish();
    return c;
}

inline TrainConfig parse_training(const nlohmann::json& j) {
    StrictObject o(j, "training");
    TrainConfig c;
    if (const auto* opt = o.sub("optimizer")) c.opt = parse_optimizer(*opt);
    o.get("ema_decay", c.ema_decay);
    o.get("grad_clip", c.grad_clip);
    o.finish();
    return c;
}

inline GuidanceConfig parse_guidance(const nlohmann::json& j) {
    StrictObject o(j, "guidance");
    GuidanceConfig c;
    std::string scheme = "none";
    o.get_string("scheme", scheme);
    if (scheme == "none") c.scheme = GuidanceScheme::none;
    else if (scheme == "jit") c.scheme = GuidanceScheme::jit;
    else if (scheme == "sit") c.scheme = GuidanceScheme::sit;
    else throw std::runtime_error("config: bad value for key 'guidance.scheme'");
    o.get("scale", c.s);
    o.get("s1", c.s1);
    o.get("s2", c.s2);
    o.get("renorm", c.renorm);
    o.finish();
    return c;
}

inline SamplerConfig parse_sampler(const nlohmann::json& j) {
    StrictObject o(j, "sampler");
    SamplerConfig c;
    o.get("n_steps", c.n_steps);
    o.get("seed", c.seed);
    o.finish();
    if (c.n_steps < 1) throw std::runtime_error("config: sampler.n_steps must be positive");
    return c;
}

inline DatasetConfig parse_dataset(const nlohmann::json& j) {
    StrictObject o(j, "dataset");
    DatasetConfig c;
    o.get("frames", c.frames);
    o.get("height", c.height);
    o.get("width", c.width);
    o.finish();
    return c;
}

}  // namespace config_detail

inline RunConfig parse_run_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(std::string("config: JSON parse error: ") + e.what());
    }
    config_detail::StrictObject o(j, "");
    RunConfig c;
    if (const auto* s = o.sub("model")) c.model = config_detail::parse_model(*s);
    if (const auto* s = o.sub("training")) c.training = config_detail::parse_training(*s);
    o.get("steps", c.steps);
    o.get("batch_size", c.batch_size);
    o.get("checkpoint_every", c.checkpoint_every);
    if (const auto* s = o.sub("guidance")) c.guidance = config_detail::parse_guidance(*s);
    if (const auto* s = o.sub("sampler")) c.sampler = config_detail::parse_sampler(*s);
    if (const auto* s = o.sub("dataset")) c.dataset = config_detail::parse_dataset(*s);
    o.get("seed", c.seed);
    o.finish();
    if (c.steps < 1) throw std::runtime_error("config: steps must be positive");
    if (c.batch_size < 1) throw std::runtime_error("config: batch_size must be positive");
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_run_config(text);
}

}  // namespace stiv
