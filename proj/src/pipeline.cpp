#include "cvid/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "cvid/image_io.hpp"

namespace fs = std::filesystem;

namespace cvid {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::stringstream ss(s);
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

struct LineCtx {
    const std::string& origin;
    int line;

    [[noreturn]] void fail(const std::string& what) const {
        throw ConfigError(origin + ":" + std::to_string(line) + ": " + what);
    }
};

int64_t parse_i64(const std::string& v, const LineCtx& ctx) {
    try {
        size_t used = 0;
        int64_t x = std::stoll(v, &used);
        if (used != v.size()) ctx.fail("trailing characters after integer '" + v + "'");
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        ctx.fail("expected an integer, got '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& v, const LineCtx& ctx) {
    int64_t x = parse_i64(v, ctx);
    if (x < 0) ctx.fail("expected a non-negative integer, got '" + v + "'");
    return static_cast<uint64_t>(x);
}

double parse_f64(const std::string& v, const LineCtx& ctx) {
    try {
        size_t used = 0;
        double x = std::stod(v, &used);
        if (used != v.size()) ctx.fail("trailing characters after number '" + v + "'");
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        ctx.fail("expected a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& v, const LineCtx& ctx) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    ctx.fail("expected true/false, got '" + v + "'");
}

// one key = value per line; '#' starts a comment line
void for_each_entry(const std::string& text, const std::string& origin,
                    const std::function<void(const std::string&, const std::string&,
                                             const LineCtx&)>& sink) {
    std::stringstream ss(text);
    std::string raw;
    int line = 0;
    while (std::getline(ss, raw)) {
        ++line;
        LineCtx ctx{origin, line};
        std::string s = trim(raw);
        if (s.empty() || s[0] == '#') continue;
        size_t eq = s.find('=');
        if (eq == std::string::npos) ctx.fail("expected 'key = value', got '" + s + "'");
        std::string key = trim(s.substr(0, eq));
        std::string val = trim(s.substr(eq + 1));
        if (key.empty()) ctx.fail("empty key");
        sink(key, val, ctx);
    }
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void require_dir_set(const std::string& v, const std::string& key) {
    if (v.empty()) throw ConfigError("config key '" + key + "' must be set for this command");
}

Tensor frame_slice(const Tensor& frames, int64_t f) {
    int64_t c = frames.dim(1), h = frames.dim(2), w = frames.dim(3);
    Tensor img({c, h, w});
    std::copy_n(frames.data.begin() + f * c * h * w, c * h * w, img.data.begin());
    return img;
}

struct ModelBundle {
    std::unique_ptr<Rng> rng;
    std::unique_ptr<Denoiser> den;
    std::unique_ptr<StructureGuide> guide;
    PromptEmbedding prompt;
};

// seed drives model init; training draws use seed + 1 (documented draw order)
ModelBundle build_model(const PipelineConfig& cfg) {
    ModelBundle m;
    m.rng = std::make_unique<Rng>(cfg.seed);
    m.den = std::make_unique<Denoiser>(cfg.model, *m.rng);
    m.guide = std::make_unique<StructureGuide>(*m.den, *m.rng);
    try {
        m.prompt = m.den->make_prompt(cfg.prompt_ids, cfg.prompt_words, cfg.prompt_custom_index);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("prompt: ") + e.what());
    }
    return m;
}

ControlSequence read_control(const PipelineConfig& cfg, const std::string& dir) {
    ControlSequence ctrl;
    ctrl.maps = read_gray_sequence(dir, "ctrl", cfg.model.frames);
    ctrl.kind = cfg.control_kind;
    try {
        validate_control(ctrl, cfg.model);
    } catch (const std::exception& e) {
        throw ConfigError("control sequence in '" + dir + "': " + e.what());
    }
    return ctrl;
}

Tensor read_source_frames(const PipelineConfig& cfg) {
    Tensor frames = read_frame_sequence(cfg.frames_dir, "frame", cfg.model.frames);
    if (frames.dim(2) != cfg.model.pixel_h() || frames.dim(3) != cfg.model.pixel_w())
        throw ConfigError("frames are " + std::to_string(frames.dim(3)) + "x" +
                          std::to_string(frames.dim(2)) + " but the model expects " +
                          std::to_string(cfg.model.pixel_w()) + "x" +
                          std::to_string(cfg.model.pixel_h()));
    return frames;
}

void require_artifact(const std::string& path, const std::string& what,
                      const std::string& produce_cmd) {
    if (path.empty())
        throw ConfigError("config key for the " + what + " path must be set");
    if (!fs::exists(path))
        throw ConfigError(what + " '" + path + "' not found; run `" + produce_cmd + "` first");
}

void ensure_parent_dir(const std::string& path) {
    fs::path p = fs::path(path).parent_path();
    if (!p.empty()) fs::create_directories(p);
}

NoiseSchedule schedule_for(const PipelineConfig& cfg) {
    try {
        if (cfg.schedule_beta_start == 0.0 && cfg.schedule_beta_end == 0.0)
            return make_default_schedule(cfg.schedule_steps);
        return NoiseSchedule::make(cfg.schedule_steps, cfg.schedule_beta_start,
                                   cfg.schedule_beta_end);
    } catch (const std::domain_error& e) {
        throw ConfigError(std::string("schedule: ") + e.what());
    }
}

}  // namespace

PipelineConfig PipelineConfig::parse(const std::string& text, const std::string& origin) {
    PipelineConfig c;
    for_each_entry(text, origin, [&](const std::string& k, const std::string& v,
                                     const LineCtx& ctx) {
        if (k == "frames_dir") c.frames_dir = v;
        else if (k == "control_dir") c.control_dir = v;
        else if (k == "edit_control_dir") c.edit_control_dir = v;
        else if (k == "checkpoint") c.checkpoint_path = v;
        else if (k == "store") c.store_path = v;
        else if (k == "out_dir") c.out_dir = v;
        else if (k == "edit_spec") c.edit_spec_path = v;
        else if (k == "control_kind") c.control_kind = v;
        else if (k == "seed") c.seed = parse_u64(v, ctx);
        else if (k == "schedule.steps") c.schedule_steps = (int)parse_i64(v, ctx);
        else if (k == "schedule.beta_start") c.schedule_beta_start = parse_f64(v, ctx);
        else if (k == "schedule.beta_end") c.schedule_beta_end = parse_f64(v, ctx);
        else if (k == "model.frames") c.model.frames = parse_i64(v, ctx);
        else if (k == "model.channels") c.model.channels = parse_i64(v, ctx);
        else if (k == "model.height") c.model.height = parse_i64(v, ctx);
        else if (k == "model.width") c.model.width = parse_i64(v, ctx);
        else if (k == "model.hidden") c.model.hidden = parse_i64(v, ctx);
        else if (k == "model.heads") c.model.heads = (int)parse_i64(v, ctx);
        else if (k == "model.blocks") c.model.blocks = (int)parse_i64(v, ctx);
        else if (k == "model.prompt_dim") c.model.prompt_dim = parse_i64(v, ctx);
        else if (k == "model.patch") c.model.patch = parse_i64(v, ctx);
        else if (k == "model.lora_rank") c.model.lora_rank = (int)parse_i64(v, ctx);
        else if (k == "model.vocab") c.model.vocab = parse_i64(v, ctx);
        else if (k == "model.mlp_mult") c.model.mlp_mult = parse_i64(v, ctx);
        else if (k == "train.iterations") c.train.iterations = (int)parse_i64(v, ctx);
        else if (k == "train.learning_rate") c.train.learning_rate = parse_f64(v, ctx);
        else if (k == "train.batch_timesteps") c.train.batch_timesteps = (int)parse_i64(v, ctx);
        else if (k == "train.optimizer") c.train.optimizer = v;
        else if (k == "train.lora") c.train.train_lora = parse_bool(v, ctx);
        else if (k == "train.token_embedding") c.train.train_token_embedding = parse_bool(v, ctx);
        else if (k == "train.guide_temporal") c.train.train_guide_temporal = parse_bool(v, ctx);
        else if (k == "train.guide_full") c.train.train_guide_full = parse_bool(v, ctx);
        else if (k == "train.log") c.train.log_path = v;
        else if (k == "train.base_word") c.train.base_word_id = parse_i64(v, ctx);
        else if (k == "remix.tau") c.remix.tau = parse_f64(v, ctx);
        else if (k == "remix.t_lo") c.remix.t_lo = (int)parse_i64(v, ctx);
        else if (k == "remix.target_words") c.remix.target_words = split_list(v);
        else if (k == "prompt.ids") {
            c.prompt_ids.clear();
            for (const std::string& s : split_list(v)) c.prompt_ids.push_back(parse_i64(s, ctx));
        } else if (k == "prompt.words") c.prompt_words = split_list(v);
        else if (k == "prompt.custom_index") c.prompt_custom_index = (int)parse_i64(v, ctx);
        else ctx.fail("unknown key '" + k + "'");
    });
    return c;
}

PipelineConfig PipelineConfig::parse_file(const std::string& path) {
    return parse(read_text_file(path), path);
}

void PipelineConfig::validate() const {
    try {
        model.validate();
        train.validate();
        remix.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    if (schedule_steps < 1) throw ConfigError("schedule.steps must be >= 1");
    if ((schedule_beta_start == 0.0) != (schedule_beta_end == 0.0))
        throw ConfigError("schedule.beta_start and schedule.beta_end must be set together");
    if (prompt_ids.empty()) throw ConfigError("prompt.ids must list at least one word id");
    if (prompt_ids.size() != prompt_words.size())
        throw ConfigError("prompt.ids and prompt.words must have the same length");
    for (int64_t id : prompt_ids)
        if (id < 0 || id >= model.vocab)
            throw ConfigError("prompt id " + std::to_string(id) + " outside vocab [0, " +
                              std::to_string(model.vocab) + ")");
    if (prompt_custom_index != -1 &&
        (prompt_custom_index < 0 || prompt_custom_index >= (int)prompt_ids.size()))
        throw ConfigError("prompt.custom_index out of range");
    if (control_kind != "edge" && control_kind != "sketch" && control_kind != "pose-raster")
        throw ConfigError("control_kind must be edge, sketch or pose-raster");
}

EditSpec parse_edit_spec_file(const std::string& path) {
    EditSpec spec;
    for_each_entry(read_text_file(path), path, [&](const std::string& k, const std::string& v,
                                                   const LineCtx& ctx) {
        if (k == "dx") { spec.params.dx = parse_f64(v, ctx); spec.has_params = true; }
        else if (k == "dy") { spec.params.dy = parse_f64(v, ctx); spec.has_params = true; }
        else if (k == "sx") { spec.params.sx = parse_f64(v, ctx); spec.has_params = true; }
        else if (k == "sy") { spec.params.sy = parse_f64(v, ctx); spec.has_params = true; }
        else if (k == "edited_frame") {
            if (!fs::exists(v)) ctx.fail("edited frame '" + v + "' not found");
            spec.edited_frame = read_png_gray(v);
            spec.has_frame = true;
        } else if (k == "target_words") spec.target_words = split_list(v);
        else if (k == "target_prompt") spec.target_prompt = v;
        else ctx.fail("unknown key '" + k + "'");
    });
    try {
        spec.validate();
        if (spec.has_params) spec.params.validate();
    } catch (const std::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return spec;
}

Tensor read_frame_sequence(const std::string& dir, const std::string& prefix, int64_t count) {
    if (count < 1) throw ConfigError("frame count must be >= 1");
    std::string missing;
    for (int64_t i = 0; i < count; ++i) {
        std::string p = indexed_path(dir, prefix, (int)i);
        if (!fs::exists(p)) missing += (missing.empty() ? "" : ", ") + p;
    }
    if (!missing.empty()) throw ConfigError("missing input frames: " + missing);

    Tensor first = read_png_rgb(indexed_path(dir, prefix, 0));
    int64_t h = first.dim(1), w = first.dim(2);
    Tensor out({count, 3, h, w});
    std::copy_n(first.data.begin(), 3 * h * w, out.data.begin());
    for (int64_t i = 1; i < count; ++i) {
        Tensor f = read_png_rgb(indexed_path(dir, prefix, (int)i));
        if (f.dim(1) != h || f.dim(2) != w)
            throw ConfigError("frame " + std::to_string(i) + " is " + std::to_string(f.dim(2)) +
                              "x" + std::to_string(f.dim(1)) + ", expected " + std::to_string(w) +
                              "x" + std::to_string(h));
        std::copy_n(f.data.begin(), 3 * h * w, out.data.begin() + i * 3 * h * w);
    }
    return out;
}

Tensor read_gray_sequence(const std::string& dir, const std::string& prefix, int64_t count) {
    if (count < 1) throw ConfigError("frame count must be >= 1");
    std::string missing;
    for (int64_t i = 0; i < count; ++i) {
        std::string p = indexed_path(dir, prefix, (int)i);
        if (!fs::exists(p)) missing += (missing.empty() ? "" : ", ") + p;
    }
    if (!missing.empty()) throw ConfigError("missing input frames: " + missing);

    Tensor first = read_png_gray(indexed_path(dir, prefix, 0));
    int64_t h = first.dim(0), w = first.dim(1);
    Tensor out({count, 1, h, w});
    std::copy_n(first.data.begin(), h * w, out.data.begin());
    for (int64_t i = 1; i < count; ++i) {
        Tensor f = read_png_gray(indexed_path(dir, prefix, (int)i));
        if (f.dim(0) != h || f.dim(1) != w)
            throw ConfigError("frame " + std::to_string(i) + " is " + std::to_string(f.dim(1)) +
                              "x" + std::to_string(f.dim(0)) + ", expected " + std::to_string(w) +
                              "x" + std::to_string(h));
        std::copy_n(f.data.begin(), h * w, out.data.begin() + i * h * w);
    }
    return out;
}

void write_frame_sequence(const std::string& dir, const std::string& prefix,
                          const Tensor& frames) {
    if (frames.ndim() != 4 || (frames.dim(1) != 3 && frames.dim(1) != 1))
        throw std::invalid_argument("write_frame_sequence: expected [F,3,H,W] or [F,1,H,W]");
    fs::create_directories(dir);
    int64_t F = frames.dim(0), h = frames.dim(2), w = frames.dim(3);

    // stage every frame under a .partial name, then rename the whole set, so
    // a failure never leaves a partial sequence under the final names
    std::vector<std::string> finals, staged;
    try {
        for (int64_t f = 0; f < F; ++f) {
            std::string final_path = indexed_path(dir, prefix, (int)f);
            std::string stage_path = final_path + ".partial";
            Tensor img = frame_slice(frames, f);
            if (frames.dim(1) == 3)
                write_png_rgb(stage_path, img);
            else
                write_png_gray(stage_path, img.reshaped({h, w}));
            staged.push_back(stage_path);
            finals.push_back(final_path);
        }
        for (size_t i = 0; i < staged.size(); ++i) fs::rename(staged[i], finals[i]);
    } catch (...) {
        for (const std::string& p : staged) {
            std::error_code ec;
            fs::remove(p, ec);
        }
        throw;
    }
}

Tensor make_moving_square_clip(int64_t frames, int64_t size, int64_t square, int64_t x0,
                               int64_t y0, int64_t step) {
    if (frames < 1 || size < 1 || square < 1)
        throw std::domain_error("make_moving_square_clip: sizes must be positive");
    int64_t last_x = x0 + step * (frames - 1);
    if (x0 < 0 || y0 < 0 || y0 + square > size || std::min(x0, last_x) < 0 ||
        std::max(x0, last_x) + square > size)
        throw std::domain_error("make_moving_square_clip: square leaves the frame");
    Tensor clip({frames, 3, size, size});
    for (int64_t f = 0; f < frames; ++f) {
        int64_t x = x0 + step * f;
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t y = y0; y < y0 + square; ++y)
                for (int64_t i = x; i < x + square; ++i) clip.at(f, c, y, i) = 1.0;
    }
    return clip;
}

Tensor LatentMeanEmbedder::embed(const Tensor& frame) const {
    if (frame.ndim() != 3 || frame.dim(0) != 3)
        throw std::invalid_argument("embed: expected a [3,H,W] frame");
    Tensor latent = ae_.encode(frame.reshaped({1, 3, frame.dim(1), frame.dim(2)}));
    int64_t C = latent.dim(1), S = latent.dim(2) * latent.dim(3);
    Tensor e({C});
    for (int64_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (int64_t i = 0; i < S; ++i) s += latent.data[c * S + i];
        e[c] = s / (double)S;
    }
    return e;
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "cosine_similarity");
    if (a.data == b.data) return 1.0;
    double na = l2_norm(a), nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double temporal_consistency(const std::vector<Tensor>& embeddings) {
    if (embeddings.size() < 2)
        throw std::domain_error("temporal_consistency: need at least two frames");
    double s = 0.0;
    for (size_t i = 0; i + 1 < embeddings.size(); ++i)
        s += cosine_similarity(embeddings[i], embeddings[i + 1]);
    return s / (double)(embeddings.size() - 1);
}

double temporal_consistency(const Tensor& frames, const Embedder& embedder) {
    if (frames.ndim() != 4 || frames.dim(0) < 2)
        throw std::domain_error("temporal_consistency: need [F,3,H,W] with F >= 2");
    std::vector<Tensor> embeddings;
    embeddings.reserve((size_t)frames.dim(0));
    for (int64_t f = 0; f < frames.dim(0); ++f) embeddings.push_back(embedder.embed(frame_slice(frames, f)));
    return temporal_consistency(embeddings);
}

void cmd_extract(const PipelineConfig& cfg) {
    cfg.validate();
    require_dir_set(cfg.frames_dir, "frames_dir");
    require_dir_set(cfg.control_dir, "control_dir");
    Tensor frames = read_frame_sequence(cfg.frames_dir, "frame", cfg.model.frames);

    std::vector<int64_t> empty;
    ControlSequence ctrl;
    try {
        ctrl = extract_control(frames, cfg.control_kind, &empty);
    } catch (const std::domain_error& e) {
        throw ConfigError(e.what());
    }
    for (int64_t f : empty)
        std::cerr << "warning: control frame " << f << " has no foreground\n";
    write_frame_sequence(cfg.control_dir, "ctrl", ctrl.maps);
    std::cout << "extract: wrote " << cfg.model.frames << " control frames to "
              << cfg.control_dir << "\n";
}

void cmd_edit_control(const PipelineConfig& cfg) {
    cfg.validate();
    require_dir_set(cfg.control_dir, "control_dir");
    require_dir_set(cfg.edit_control_dir, "edit_control_dir");
    if (cfg.edit_spec_path.empty()) throw ConfigError("config key 'edit_spec' must be set");
    if (!fs::exists(cfg.edit_spec_path))
        throw ConfigError("edit spec '" + cfg.edit_spec_path + "' not found");

    EditSpec spec = parse_edit_spec_file(cfg.edit_spec_path);
    ControlSequence ctrl;
    ctrl.maps = read_gray_sequence(cfg.control_dir, "ctrl", cfg.model.frames);
    ctrl.kind = cfg.control_kind;

    std::vector<int64_t> warned;
    ControlSequence edited = propagate(ctrl, spec, &warned);
    for (int64_t f : warned)
        std::cerr << "warning: control frame " << f << " has no object; copied unchanged\n";
    write_frame_sequence(cfg.edit_control_dir, "ctrl", edited.maps);
    std::cout << "edit-control: wrote " << cfg.model.frames << " edited control frames to "
              << cfg.edit_control_dir << "\n";
}

void cmd_customize(const PipelineConfig& cfg) {
    cfg.validate();
    require_dir_set(cfg.frames_dir, "frames_dir");
    require_dir_set(cfg.control_dir, "control_dir");
    require_dir_set(cfg.checkpoint_path, "checkpoint");
    Tensor frames = read_source_frames(cfg);
    ControlSequence ctrl = read_control(cfg, cfg.control_dir);

    ModelBundle m = build_model(cfg);
    NoiseSchedule sched = schedule_for(cfg);
    TrainConfig train = cfg.train;
    train.seed = cfg.seed + 1;
    Customizer customizer(*m.guide, sched, train);
    CustomizeResult result = customizer.customize(frames, m.prompt, ctrl);

    ensure_parent_dir(cfg.checkpoint_path);
    result.checkpoint.save(cfg.checkpoint_path);
    std::printf("customize: %d iterations, loss %.6f -> %.6f (first/last fifth means)\n",
                cfg.train.iterations, result.first_fifth_mean, result.last_fifth_mean);
}

void cmd_invert(const PipelineConfig& cfg) {
    cfg.validate();
    require_dir_set(cfg.frames_dir, "frames_dir");
    require_dir_set(cfg.control_dir, "control_dir");
    require_artifact(cfg.checkpoint_path, "checkpoint", "customize");
    require_dir_set(cfg.store_path, "store");
    Tensor frames = read_source_frames(cfg);
    ControlSequence ctrl = read_control(cfg, cfg.control_dir);

    ModelBundle m = build_model(cfg);
    try {
        load_checkpoint(m.den->params(), Archive::load(cfg.checkpoint_path));
    } catch (const std::exception& e) {
        throw ConfigError("checkpoint '" + cfg.checkpoint_path + "': " + e.what());
    }

    NoiseSchedule sched = schedule_for(cfg);
    VideoLatent z0(m.den->encode(frames), 0);
    auto [z_T, store] = invert_with_guidance(*m.guide, z0, ctrl, m.prompt, sched);

    ensure_parent_dir(cfg.store_path);
    store_to_archive(store).save(cfg.store_path);
    std::cout << "invert: stored " << sched.total_steps << " steps of attention at "
              << cfg.store_path << "\n";
}

void cmd_edit(const PipelineConfig& cfg) {
    cfg.validate();
    require_artifact(cfg.checkpoint_path, "checkpoint", "customize");
    require_artifact(cfg.store_path, "attention store", "invert");
    require_dir_set(cfg.out_dir, "out_dir");
    const std::string& ctrl_dir =
        cfg.edit_control_dir.empty() ? cfg.control_dir : cfg.edit_control_dir;
    require_dir_set(ctrl_dir, "control_dir");
    ControlSequence ctrl = read_control(cfg, ctrl_dir);

    ModelBundle m = build_model(cfg);
    try {
        load_checkpoint(m.den->params(), Archive::load(cfg.checkpoint_path));
    } catch (const std::exception& e) {
        throw ConfigError("checkpoint '" + cfg.checkpoint_path + "': " + e.what());
    }

    AttentionStore store;
    try {
        store = store_from_archive(Archive::load(cfg.store_path));
        store.validate();
    } catch (const std::exception& e) {
        throw ConfigError("attention store '" + cfg.store_path + "': " + e.what());
    }

    NoiseSchedule sched = schedule_for(cfg);
    if (store.total_steps != sched.total_steps)
        throw ConfigError("attention store was built for T=" + std::to_string(store.total_steps) +
                          " but schedule.steps = " + std::to_string(sched.total_steps));
    for (const std::string& w : cfg.remix.target_words)
        word_index(m.prompt, w);  // unknown labels fail before any side effect

    VideoLatent edited =
        generate_with_remix(*m.guide, store.z_T, store, ctrl, m.prompt, cfg.remix, sched);
    Tensor out = m.den->decode(edited.data);
    for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
    write_frame_sequence(cfg.out_dir, "out", out);
    std::cout << "edit: wrote " << cfg.model.frames << " frames to " << cfg.out_dir << "\n";
}

MetricsReport cmd_metrics(const PipelineConfig& cfg) {
    cfg.validate();
    require_dir_set(cfg.out_dir, "out_dir");
    std::string prefix;
    if (fs::exists(indexed_path(cfg.out_dir, "out", 0)))
        prefix = "out";
    else if (fs::exists(indexed_path(cfg.out_dir, "frame", 0)))
        prefix = "frame";
    else
        throw ConfigError("no frames found: tried " + indexed_path(cfg.out_dir, "out", 0) +
                          " and " + indexed_path(cfg.out_dir, "frame", 0));
    Tensor frames = read_frame_sequence(cfg.out_dir, prefix, cfg.model.frames);

    MetricsReport report;
    LatentMeanEmbedder embedder(cfg.model.patch);
    try {
        report.tem_con = temporal_consistency(frames, embedder);
    } catch (const std::domain_error& e) {
        throw ConfigError(e.what());
    }
    std::printf("Tem-Con: %.6f\n", report.tem_con);
    if (embedder.has_text_branch())
        std::printf("Fram-Acc: %.6f\n", report.fram_acc);
    else
        std::printf("Fram-Acc: unavailable (default embedder has no text branch)\n");
    return report;
}

}  // namespace cvid
