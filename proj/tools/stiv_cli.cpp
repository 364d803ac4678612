// Command-line surface: train / sample / long-video / surgery / gridsearch /
// corpus. One command per process; exit 0 on success, nonzero with a single
// "error: ..." line on stderr otherwise.

#include <stiv/checkpoint.hpp>
#include <stiv/config.hpp>
#include <stiv/eval.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace stiv;

namespace {

TaskKind parse_mode(const std::string& s) {
    if (s == "t2v") return TaskKind::t2v;
    if (s == "ti2v") return TaskKind::ti2v;
    if (s == "predict4") return TaskKind::predict4;
    if (s == "interpolate") return TaskKind::interpolate;
    if (s == "keyframe") return TaskKind::keyframe;
    throw std::runtime_error("unknown mode: " + s);
}

GuidanceConfig guidance_from_flags(const std::string& cfg_name, double scale, double s1, double s2,
                                   bool renorm) {
    GuidanceConfig g;
    if (cfg_name == "none") g.scheme = GuidanceScheme::none;
    else if (cfg_name == "jit") g.scheme = GuidanceScheme::jit;
    else if (cfg_name == "sit") g.scheme = GuidanceScheme::sit;
    else throw std::runtime_error("unknown cfg scheme: " + cfg_name);
    g.s = scale;
    g.s1 = s1;
    g.s2 = s2;
    g.renorm = renorm;
    return g;
}

void write_frames(const fs::path& dir, const std::vector<Image>& frames) {
    fs::create_directories(dir);
    char name[32];
    for (size_t i = 0; i < frames.size(); ++i) {
        std::snprintf(name, sizeof(name), "frame_%04zu.ppm", i);
        write_ppm((dir / name).string(), frames[i]);
    }
}

// Raw latent dump: u64 rank, u64 dims..., then f64 little-endian data.
void write_latent(const fs::path& path, const Tensor64& t) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open latent dump: " + path.string());
    uint64_t rank = t.shape().size();
    f.write(reinterpret_cast<const char*>(&rank), 8);
    for (int64_t d : t.shape()) {
        uint64_t v = static_cast<uint64_t>(d);
        f.write(reinterpret_cast<const char*>(&v), 8);
    }
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.data().size() * 8));
    if (!f) throw std::runtime_error("latent dump write failed: " + path.string());
}

std::vector<TrainSample<double>> build_train_set(const RunConfig& rc) {
    std::vector<TrainSample<double>> set;
    for (const auto& base : train_corpus()) {
        ClipSpec spec = base;
        spec.frames = rc.dataset.frames;
        spec.height = rc.dataset.height;
        spec.width = rc.dataset.width;
        auto clip = generate_clip(spec);
        auto latent = encode_pixels(frames_to_pixels<double>(clip.frames));
        ConditionT<double> cond{clip.tokens, std::nullopt};
        // every sample carries its first frame; image dropout decides per
        // step whether the model sees it (TI2V) or not (T2V)
        cond.image = ImageConditionT<double>{index_select(latent, 0, {0}).detach(), {0}};
        set.push_back({{latent, clip.micro}, cond, TaskMode{TaskKind::ti2v}});
    }
    return set;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, const std::string& resume) {
    RunConfig rc = load_run_config(config_path);
    fs::create_directories(out_dir);
    auto set = build_train_set(rc);

    StivModelT<double> model = [&] {
        if (!resume.empty()) return load_checkpoint<double>(resume);
        RngState rng{rc.seed, 0};
        return StivModelT<double>::init(rc.model, rng);
    }();
    Trainer<double> trainer(model, rc.training, rc.seed + 1);
    int64_t start_step = 0;
    if (!resume.empty()) {
        TrainCheckpointState<double> st;
        load_checkpoint<double>(resume, &st);
        restore_train_state(trainer, st);
        start_step = st.step_count;
    }

    std::ofstream log(fs::path(out_dir) / "loss.csv", resume.empty() ? std::ios::trunc : std::ios::app);
    if (resume.empty()) log << "step,loss,grad_norm,lr\n";

    auto save_all = [&](int64_t step) {
        auto st = capture_train_state(trainer);
        save_checkpoint((fs::path(out_dir) / ("ckpt_" + std::to_string(step) + ".stiv")).string(), model,
                        &st);
        auto ema_params = model.parameters();
        std::vector<std::vector<double>> raw;
        for (auto& p : ema_params) raw.push_back(p.data());
        trainer.ema.apply(ema_params);
        save_checkpoint((fs::path(out_dir) / ("ckpt_" + std::to_string(step) + "_ema.stiv")).string(),
                        model);
        for (size_t i = 0; i < ema_params.size(); ++i) ema_params[i].data() = raw[i];
    };

    for (int64_t step = start_step; step < rc.steps; ++step) {
        std::vector<TrainSample<double>> batch;
        for (int64_t b = 0; b < rc.batch_size; ++b)
            batch.push_back(set[static_cast<size_t>((step * rc.batch_size + b) % set.size())]);
        double loss = trainer.step(batch);
        log << (step + 1) << "," << loss << "," << trainer.last_grad_norm << "," << trainer.opt.lr()
            << "\n";
        if (rc.checkpoint_every > 0 && (step + 1) % rc.checkpoint_every == 0 && step + 1 < rc.steps)
            save_all(step + 1);
    }
    save_all(rc.steps);
    log.flush();

    std::vector<TaskMode> modes{TaskMode{TaskKind::ti2v}};
    auto rep = eval_suite(model, holdout_corpus(), modes, rc.guidance, rc.sampler, 16);
    std::ofstream evalf(fs::path(out_dir) / "eval.csv");
    evalf << rep.summary();
    return 0;
}

int cmd_sample(const std::string& ckpt, const std::string& mode_name, const std::string& caption,
               const std::vector<std::string>& image_paths, int64_t steps, const std::string& cfg_name,
               double scale, double s1, double s2, bool renorm, uint64_t seed, const std::string& out_dir,
               int64_t frames, int64_t height, int64_t width) {
    auto model = load_checkpoint<double>(ckpt);
    TaskMode mode{parse_mode(mode_name)};
    auto pins = mode.pinned_frames(frames);
    if (static_cast<int64_t>(image_paths.size()) != static_cast<int64_t>(pins.size()))
        throw std::runtime_error("mode " + mode_name + " needs " + std::to_string(pins.size()) +
                                 " condition image(s), got " + std::to_string(image_paths.size()));

    ConditionT<double> cond;
    if (!caption.empty()) cond.text_tokens = tokenize(caption);
    if (!pins.empty()) {
        std::vector<Image> imgs;
        for (const auto& p : image_paths) imgs.push_back(read_ppm(p));
        // condition images dictate the clip geometry
        height = imgs.front().height;
        width = imgs.front().width;
        auto latent = encode_pixels(frames_to_pixels<double>(imgs));
        cond.image = ImageConditionT<double>{latent, pins};
    }

    MicroConditions micro{height, width, 0, 0, mode.sampling_stride(), frames};
    GuidanceConfig g = guidance_from_flags(cfg_name, scale, s1, s2, renorm);
    SamplerConfig sc{steps, seed};
    Shape latent_shape{frames, height / 2, width / 2, kCodecChannels};
    auto velocity = model_velocity(model);
    auto x = euler_sample<double>(velocity, latent_shape, micro, cond, mode, g, sc);

    fs::create_directories(out_dir);
    write_frames(out_dir, pixels_to_frames(decode_latent(x.data)));
    write_latent(fs::path(out_dir) / "latent.bin", x.data);
    return 0;
}

int cmd_long_video(const std::string& ckpt, const std::string& caption, int64_t stride, int64_t seg_frames,
                   int64_t keyframes, int64_t steps, uint64_t seed, const std::string& out_dir,
                   int64_t height, int64_t width) {
    if (keyframes < 2) throw std::runtime_error("long-video needs at least 2 keyframes");
    auto model = load_checkpoint<double>(ckpt);
    auto velocity = model_velocity(model);

    ConditionT<double> cond;
    if (!caption.empty()) cond.text_tokens = tokenize(caption);

    // pass 1: one keyframe-mode clip, micro stride advertises the temporal gap
    TaskMode key_mode{TaskKind::keyframe};
    MicroConditions km{height, width, 0, 0, stride, keyframes};
    km.sampling_stride = stride;
    SamplerConfig ksc{steps, seed};
    Shape kshape{keyframes, height / 2, width / 2, kCodecChannels};
    GuidanceConfig g;  // composition itself runs unguided
    auto keys = euler_sample<double>(velocity, kshape, km, cond, key_mode, g, ksc);
    auto key_frames = pixels_to_frames(decode_latent(keys.data));

    // pass 2: each consecutive keyframe pair bounds one interpolated segment;
    // every segment emits its full T frames, so the shared keyframe appears
    // byte-equal at the end of one segment and the start of the next,
    // (K-1)*T frames in total
    fs::create_directories(out_dir);
    TaskMode seg_mode{TaskKind::interpolate};
    std::vector<Image> out_frames;
    for (int64_t k = 0; k + 1 < keyframes; ++k) {
        std::vector<Image> pair{key_frames[static_cast<size_t>(k)], key_frames[static_cast<size_t>(k + 1)]};
        auto pin_latent = encode_pixels(frames_to_pixels<double>(pair));
        ConditionT<double> seg_cond = cond;
        seg_cond.image = ImageConditionT<double>{pin_latent, {0, seg_frames - 1}};
        MicroConditions sm{height, width, 0, 0, 1, seg_frames};
        SamplerConfig ssc{steps, seed + 1000 + static_cast<uint64_t>(k)};
        Shape sshape{seg_frames, height / 2, width / 2, kCodecChannels};
        auto seg = euler_sample<double>(velocity, sshape, sm, seg_cond, seg_mode, g, ssc);
        for (auto& f : pixels_to_frames(decode_latent(seg.data))) out_frames.push_back(std::move(f));
    }
    write_frames(out_dir, out_frames);
    std::cout << out_frames.size() << " frames\n";
    return 0;
}

int cmd_surgery(const std::string& from_t2i, const std::string& from_t2v, const std::string& target_path,
                const std::string& rope, int64_t old_frames, int64_t new_frames, int64_t old_grid,
                int64_t new_grid, const std::string& out, uint64_t seed) {
    RunConfig rc = load_run_config(target_path);
    RngState rng{seed, 0};
    std::map<std::string, std::string> audit;
    StivModelT<double> result = [&] {
        if (!rope.empty()) {
            if (from_t2v.empty()) throw std::runtime_error("--rope extension needs --from-t2v");
            auto short_model = load_checkpoint<double>(from_t2v);
            RopeExtension ext = rope == "interpolate" ? RopeExtension::interpolate
                               : rope == "extrapolate" ? RopeExtension::extrapolate
                                                       : throw std::runtime_error("unknown rope mode: " + rope);
            auto m = extend_frames_init(short_model, old_frames, new_frames, ext);
            m.visit([&](const std::string& n, Tensor64&) { audit[n] = "t2v"; });
            return m;
        }
        if (!from_t2v.empty()) {
            auto t2v = load_checkpoint<double>(from_t2v);
            auto t2i = load_checkpoint<double>(from_t2i);
            auto res = init_from_both(t2v, t2i, rc.model, old_grid, new_grid, rng);
            audit = std::move(res.audit);
            return std::move(res.model);
        }
        auto t2i = load_checkpoint<double>(from_t2i);
        auto res = init_t2v_from_t2i(t2i, rc.model, rng);
        audit = std::move(res.audit);
        return std::move(res.model);
    }();
    save_checkpoint(out, result);
    nlohmann::json j(audit);
    std::ofstream af(out + ".audit.json");
    af << j.dump(2) << "\n";
    return 0;
}

int cmd_gridsearch(const std::string& ckpt, std::vector<double> scales1, std::vector<double> scales2,
                   int64_t samples, int64_t steps, uint64_t seed, const std::string& out) {
    if (scales1.empty() || scales2.empty()) throw std::runtime_error("gridsearch: empty scale list");
    auto model = load_checkpoint<double>(ckpt);
    auto clips = holdout_corpus();
    std::vector<TaskMode> modes{TaskMode{TaskKind::ti2v}};
    std::sort(scales1.begin(), scales1.end());
    std::sort(scales2.begin(), scales2.end());

    std::ofstream f(out);
    if (!f) throw std::runtime_error("gridsearch: cannot open " + out);
    f << "s1,s2,first_frame_exact,direction_accuracy,motion_presence,holdout_flow_loss,nan_free\n";
    for (double a : scales1)
        for (double b : scales2) {
            GuidanceConfig g;
            g.scheme = GuidanceScheme::sit;
            g.s1 = a;
            g.s2 = b;
            SamplerConfig sc{steps, seed};
            auto rep = eval_suite(model, clips, modes, g, sc, samples);
            f << a << "," << b << "," << rep.first_frame_exact << "," << rep.direction_accuracy << ","
              << rep.motion_presence << "," << rep.holdout_flow_loss << "," << rep.nan_free << "\n";
        }
    return 0;
}

int cmd_corpus(const std::string& out_dir) {
    for (const auto& spec : full_corpus()) {
        auto clip = generate_clip(spec);
        fs::path dir = fs::path(out_dir) / spec.name();
        write_frames(dir, clip.frames);
        std::ofstream cap(dir / "caption.txt");
        cap << spec.caption() << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale video diffusion transformer"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "train from a JSON config");
    std::string config_path, out_dir = ".", resume;
    train->add_option("--config", config_path)->required();
    train->add_option("--out-dir", out_dir);
    train->add_option("--resume", resume);

    // sample
    auto* sample = app.add_subcommand("sample", "sample one clip from a checkpoint");
    std::string ckpt, mode_name = "t2v", caption, cfg_name = "none";
    std::vector<std::string> image_paths;
    int64_t steps = 50, frames = 8, height = 32, width = 32;
    double scale = 7.5, s1 = 1.5, s2 = 7.5;
    bool renorm = false;
    uint64_t seed = 0;
    sample->add_option("--ckpt", ckpt)->required();
    sample->add_option("--mode", mode_name);
    sample->add_option("--caption", caption);
    sample->add_option("--image", image_paths);
    sample->add_option("--steps", steps);
    sample->add_option("--cfg", cfg_name);
    sample->add_option("--scale", scale);
    sample->add_option("--s1", s1);
    sample->add_option("--s2", s2);
    sample->add_flag("--renorm", renorm);
    sample->add_option("--seed", seed);
    sample->add_option("--out-dir", out_dir);
    sample->add_option("--frames", frames);
    sample->add_option("--height", height);
    sample->add_option("--width", width);

    // long-video
    auto* lv = app.add_subcommand("long-video", "keyframes then interpolated segments");
    int64_t kf_stride = 20, seg_frames = 20, keyframes = 20;
    lv->add_option("--ckpt", ckpt)->required();
    lv->add_option("--caption", caption);
    lv->add_option("--keyframe-stride", kf_stride);
    lv->add_option("--segment-frames", seg_frames);
    lv->add_option("--keyframes", keyframes);
    lv->add_option("--steps", steps);
    lv->add_option("--seed", seed);
    lv->add_option("--out-dir", out_dir);
    lv->add_option("--height", height);
    lv->add_option("--width", width);

    // surgery
    auto* surg = app.add_subcommand("surgery", "initialize a model from trained checkpoints");
    std::string from_t2i, from_t2v, target_path, rope, out_path = "out.stiv";
    int64_t old_frames = 0, new_frames = 0, old_grid = 0, new_grid = 0;
    surg->add_option("--from-t2i", from_t2i);
    surg->add_option("--from-t2v", from_t2v);
    surg->add_option("--target", target_path)->required();
    surg->add_option("--rope", rope);
    surg->add_option("--old-frames", old_frames);
    surg->add_option("--new-frames", new_frames);
    surg->add_option("--old-grid", old_grid);
    surg->add_option("--new-grid", new_grid);
    surg->add_option("--out", out_path);
    surg->add_option("--seed", seed);

    // gridsearch
    auto* gs = app.add_subcommand("gridsearch", "SIT scale sweep, CSV per (s1, s2)");
    std::vector<double> scales1{1.1, 1.5, 4.5, 7.5, 10.5};
    std::vector<double> scales2{1.1, 1.5, 4.5, 7.5, 10.5};
    int64_t gs_samples = 10;
    gs->add_option("--ckpt", ckpt)->required();
    gs->add_option("--scales1", scales1)->delimiter(',');
    gs->add_option("--scales2", scales2)->delimiter(',');
    gs->add_option("--samples", gs_samples);
    gs->add_option("--steps", steps);
    gs->add_option("--seed", seed);
    gs->add_option("--out", out_path);

    // corpus
    auto* corpus = app.add_subcommand("corpus", "export the synthetic corpus as PPM + captions");
    corpus->add_option("--out-dir", out_dir);

    try {
        app.parse(argc, argv);
        if (train->parsed()) return cmd_train(config_path, out_dir, resume);
        if (sample->parsed())
            return cmd_sample(ckpt, mode_name, caption, image_paths, steps, cfg_name, scale, s1, s2,
                              renorm, seed, out_dir, frames, height, width);
        if (lv->parsed())
            return cmd_long_video(ckpt, caption, kf_stride, seg_frames, keyframes, steps, seed, out_dir,
                                  height, width);
        if (surg->parsed())
            return cmd_surgery(from_t2i, from_t2v, target_path, rope, old_frames, new_frames, old_grid,
                               new_grid, out_path, seed);
        if (gs->parsed()) return cmd_gridsearch(ckpt, scales1, scales2, gs_samples, steps, seed, out_path);
        if (corpus->parsed()) return cmd_corpus(out_dir);
        return 1;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
