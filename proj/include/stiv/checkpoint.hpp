#pragma once

#include "training.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

// Checkpoint file layout:
//   bytes 0..4   magic "STIV1"
//   u64 LE       manifest byte length
//   manifest     UTF-8 JSON: config blob + sorted tensor directory
//                (name -> dtype, shape, offset) + optional train section
//   payload      raw little-endian tensor data, offsets relative to payload
//                start
// Model tensors are stored under "model/<name>", EMA shadows under
// "ema/<name>", optimizer slot arrays under "opt/<index>/<part>".

namespace stiv {

namespace ckpt_detail {

inline void require_little_endian() {
    const uint16_t probe = 1;
    if (*reinterpret_cast<const uint8_t*>(&probe) != 1)
        throw std::runtime_error("checkpoint: little-endian host required");
}

template <class S>
const char* dtype_name() {
    return sizeof(S) == 8 ? "f64" : "f32";
}

struct Entry {
    std::string dtype;
    std::vector<int64_t> shape;
    uint64_t offset = 0;
    const void* src = nullptr;  // save-side only
    uint64_t bytes = 0;
};

inline uint64_t dtype_size(const std::string& d) {
    if (d == "f64") return 8;
    if (d == "f32") return 4;
    throw std::runtime_error("checkpoint: unknown dtype " + d);
}

}  // namespace ckpt_detail

inline nlohmann::json config_to_json(const StivConfig& c) {
    return nlohmann::json{{"n_blocks", c.n_blocks},
                          {"hidden_dim", c.hidden_dim},
                          {"n_heads", c.n_heads},
                          {"spatial_patch", c.spatial_patch},
                          {"temporal_patch", c.temporal_patch},
                          {"mask_ratio", c.mask_ratio},
                          {"mask_axis", c.mask_axis == MaskAxis::spatial ? "spatial" : "temporal"},
                          {"n_decoder_blocks", c.n_decoder_blocks},
                          {"causal_temporal", c.causal_temporal},
                          {"first_frame_loss", c.first_frame_loss},
                          {"text_dropout_p", c.text_dropout_p},
                          {"image_dropout_p", c.image_dropout_p},
                          {"temporal_blocks", c.temporal_blocks},
                          {"latent_channels", c.latent_channels},
                          {"text_dim", c.text_dim},
                          {"vocab_size", c.vocab_size},
                          {"ffn_expansion", c.ffn_expansion},
                          {"spatial_pos_scale", c.spatial_pos_scale},
                          {"temporal_pos_scale", c.temporal_pos_scale}};
}

inline StivConfig config_from_json(const nlohmann::json& j) {
    StivConfig c;
    c.n_blocks = j.at("n_blocks").get<int64_t>();
    c.hidden_dim = j.at("hidden_dim").get<int64_t>();
    c.n_heads = j.at("n_heads").get<int64_t>();
    c.spatial_patch = j.at("spatial_patch").get<int64_t>();
    c.temporal_patch = j.at("temporal_patch").get<int64_t>();
    c.mask_ratio = j.at("mask_ratio").get<double>();
    std::string axis = j.at("mask_axis").get<std::string>();
    if (axis != "spatial" && axis != "temporal")
        throw std::runtime_error("config: mask_axis must be spatial or temporal");
    c.mask_axis = axis == "spatial" ? MaskAxis::spatial : MaskAxis::temporal;
    c.n_decoder_blocks = j.at("n_decoder_blocks").get<int64_t>();
    c.causal_temporal = j.at("causal_temporal").get<bool>();
    c.first_frame_loss = j.at("first_frame_loss").get<bool>();
    c.text_dropout_p = j.at("text_dropout_p").get<double>();
    c.image_dropout_p = j.at("image_dropout_p").get<double>();
    c.temporal_blocks = j.at("temporal_blocks").get<bool>();
    c.latent_channels = j.at("latent_channels").get<int64_t>();
    c.text_dim = j.at("text_dim").get<int64_t>();
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.ffn_expansion = j.at("ffn_expansion").get<int64_t>();
    c.spatial_pos_scale = j.at("spatial_pos_scale").get<double>();
    c.temporal_pos_scale = j.at("temporal_pos_scale").get<double>();
    c.validate();
    return c;
}

// Snapshot of everything beyond the weights needed for bit-exact resume.
template <class S>
struct TrainCheckpointState {
    int64_t step_count = 0;
    RngState rng;
    std::vector<typename Optimizer<S>::Slot> slots;
    std::vector<std::vector<S>> ema_shadow;
};

template <class S>
void save_checkpoint(const std::string& path, StivModelT<S>& model,
                     const TrainCheckpointState<S>* train = nullptr) {
    ckpt_detail::require_little_endian();
    std::map<std::string, ckpt_detail::Entry> dir;  // sorted by name

    auto put = [&](const std::string& name, const std::string& dtype, std::vector<int64_t> shape,
                   const void* src, uint64_t bytes) {
        if (!dir.emplace(name, ckpt_detail::Entry{dtype, std::move(shape), 0, src, bytes}).second)
            throw std::runtime_error("checkpoint: duplicate tensor name " + name);
    };

    model.visit([&](const std::string& n, TensorBase<S>& t) {
        std::vector<int64_t> shape(t.shape().begin(), t.shape().end());
        put("model/" + n, ckpt_detail::dtype_name<S>(), std::move(shape), t.data().data(),
            static_cast<uint64_t>(t.data().size() * sizeof(S)));
    });

    nlohmann::json manifest;
    manifest["config"] = config_to_json(model.config);

    if (train) {
        auto names = model.parameter_names();
        if (train->ema_shadow.size() != names.size() || train->slots.size() != names.size())
            throw std::runtime_error("checkpoint: train state size mismatch");
        for (size_t i = 0; i < names.size(); ++i) {
            const auto& sh = train->ema_shadow[i];
            put("ema/" + names[i], ckpt_detail::dtype_name<S>(), {static_cast<int64_t>(sh.size())},
                sh.data(), static_cast<uint64_t>(sh.size() * sizeof(S)));
            const auto& s = train->slots[i];
            std::string base = "opt/" + std::to_string(i) + "/";
            auto put_vec = [&](const std::string& part, const std::vector<double>& v) {
                if (!v.empty())
                    put(base + part, "f64", {static_cast<int64_t>(v.size())}, v.data(),
                        static_cast<uint64_t>(v.size() * 8));
            };
            put_vec("m", s.m);
            put_vec("row", s.row);
            put_vec("col", s.col);
            put_vec("full", s.full);
        }
        manifest["train"] = nlohmann::json{{"step_count", train->step_count},
                                           {"rng_seed", train->rng.seed},
                                           {"rng_counter", train->rng.counter},
                                           {"n_params", names.size()}};
    }

    uint64_t offset = 0;
    nlohmann::json tensors = nlohmann::json::array();
    for (auto& [name, e] : dir) {
        e.offset = offset;
        offset += e.bytes;
        tensors.push_back(
            nlohmann::json{{"name", name}, {"dtype", e.dtype}, {"shape", e.shape}, {"offset", e.offset}});
    }
    manifest["tensors"] = std::move(tensors);

    std::string mstr = manifest.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    f.write("STIV1", 5);
    uint64_t mlen = mstr.size();
    f.write(reinterpret_cast<const char*>(&mlen), 8);
    f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto& [name, e] : dir)
        f.write(reinterpret_cast<const char*>(e.src), static_cast<std::streamsize>(e.bytes));
    if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

namespace ckpt_detail {

struct LoadedFile {
    nlohmann::json manifest;
    std::vector<char> payload;
    std::map<std::string, Entry> dir;

    const Entry& entry(const std::string& name) const {
        auto it = dir.find(name);
        if (it == dir.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
        return it->second;
    }

    template <class S>
    void read_into(const std::string& name, std::vector<S>& out, const std::string& want_dtype) const {
        const Entry& e = entry(name);
        if (e.dtype != want_dtype)
            throw std::runtime_error("checkpoint: dtype mismatch for " + name + ": " + e.dtype);
        uint64_t n = e.bytes / dtype_size(e.dtype);
        if (out.size() != n)
            throw std::runtime_error("checkpoint: size mismatch for " + name);
        if (e.offset + e.bytes > payload.size())
            throw std::runtime_error("checkpoint: payload overrun for " + name);
        std::memcpy(out.data(), payload.data() + e.offset, e.bytes);
    }
};

inline LoadedFile read_file(const std::string& path) {
    require_little_endian();
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[5];
    f.read(magic, 5);
    if (!f || std::memcmp(magic, "STIV1", 5) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    uint64_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), 8);
    std::string mstr(mlen, '\0');
    f.read(mstr.data(), static_cast<std::streamsize>(mlen));
    if (!f) throw std::runtime_error("checkpoint: truncated manifest in " + path);
    LoadedFile out;
    out.manifest = nlohmann::json::parse(mstr);
    out.payload.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());

    std::string prev;
    for (const auto& t : out.manifest.at("tensors")) {
        Entry e;
        e.dtype = t.at("dtype").get<std::string>();
        e.shape = t.at("shape").get<std::vector<int64_t>>();
        e.offset = t.at("offset").get<uint64_t>();
        uint64_t n = 1;
        for (int64_t d : e.shape) n *= static_cast<uint64_t>(d);
        e.bytes = n * dtype_size(e.dtype);
        std::string name = t.at("name").get<std::string>();
        if (!prev.empty() && !(prev < name))
            throw std::runtime_error("checkpoint: manifest names not sorted/unique at " + name);
        prev = name;
        out.dir.emplace(std::move(name), std::move(e));
    }
    return out;
}

}  // namespace ckpt_detail

// Rebuilds the model from the stored config, then overwrites every parameter
// from the payload. All model tensors must be present with matching shapes.
template <class S>
StivModelT<S> load_checkpoint(const std::string& path,
                              TrainCheckpointState<S>* train = nullptr) {
    auto file = ckpt_detail::read_file(path);
    StivConfig cfg = config_from_json(file.manifest.at("config"));
    RngState rng{0, 0};
    auto model = StivModelT<S>::init(cfg, rng);
    model.visit([&](const std::string& n, TensorBase<S>& t) {
        const auto& e = file.entry("model/" + n);
        std::vector<int64_t> want(t.shape().begin(), t.shape().end());
        if (e.shape != want) throw std::runtime_error("checkpoint: shape mismatch for model/" + n);
        file.read_into("model/" + n, t.data(), ckpt_detail::dtype_name<S>());
    });

    if (train) {
        if (!file.manifest.contains("train"))
            throw std::runtime_error("checkpoint: no train section in " + path);
        const auto& tj = file.manifest.at("train");
        train->step_count = tj.at("step_count").get<int64_t>();
        train->rng = RngState{tj.at("rng_seed").get<uint64_t>(), tj.at("rng_counter").get<uint64_t>()};
        auto names = model.parameter_names();
        if (tj.at("n_params").get<size_t>() != names.size())
            throw std::runtime_error("checkpoint: parameter count changed");
        train->ema_shadow.assign(names.size(), {});
        train->slots.assign(names.size(), {});
        for (size_t i = 0; i < names.size(); ++i) {
            const auto& e = file.entry("ema/" + names[i]);
            train->ema_shadow[i].resize(static_cast<size_t>(e.shape.at(0)));
            file.read_into("ema/" + names[i], train->ema_shadow[i], ckpt_detail::dtype_name<S>());
            std::string base = "opt/" + std::to_string(i) + "/";
            auto get_vec = [&](const std::string& part, std::vector<double>& v) {
                auto it = file.dir.find(base + part);
                if (it == file.dir.end()) return;
                v.resize(static_cast<size_t>(it->second.shape.at(0)));
                file.read_into(base + part, v, "f64");
            };
            auto& s = train->slots[i];
            get_vec("m", s.m);
            get_vec("row", s.row);
            get_vec("col", s.col);
            get_vec("full", s.full);
            s.factored = !s.row.empty();
            if (s.factored) {
                s.rows = static_cast<int64_t>(s.row.size());
                s.cols = static_cast<int64_t>(s.col.size());
            }
        }
    }
    return model;
}

// Convenience wrappers tying the snapshot to a live trainer.
template <class S>
TrainCheckpointState<S> capture_train_state(const Trainer<S>& tr) {
    return TrainCheckpointState<S>{tr.opt.step_count, tr.rng, tr.opt.slots, tr.ema.shadow};
}

template <class S>
void restore_train_state(Trainer<S>& tr, const TrainCheckpointState<S>& st) {
    if (st.slots.size() != tr.opt.slots.size() || st.ema_shadow.size() != tr.ema.shadow.size())
        throw std::runtime_error("checkpoint: train state does not match trainer");
    tr.opt.step_count = st.step_count;
    tr.opt.slots = st.slots;
    tr.ema.shadow = st.ema_shadow;
    tr.rng = st.rng;
}

}  // namespace stiv
