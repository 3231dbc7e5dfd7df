#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cvid/image_io.hpp"
#include "cvid/pipeline.hpp"

using namespace cvid;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
    fs::path root;

    explicit TmpDir(const std::string& tag) {
        root = fs::temp_directory_path() / ("cvid_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~TmpDir() { fs::remove_all(root); }

    std::string sub(const std::string& name) const { return (root / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    REQUIRE(out.good());
}

// tiny end-to-end setup: 3 frames of 16x16 with a 4x4 square marching right
std::string tiny_config_text(const TmpDir& tmp) {
    std::string r = tmp.root.string();
    return "# tiny pipeline\n"
           "frames_dir = " + r + "/frames\n"
           "control_dir = " + r + "/ctrl\n"
           "edit_control_dir = " + r + "/ctrl_edit\n"
           "checkpoint = " + r + "/ckpt.cvar\n"
           "store = " + r + "/store.cvar\n"
           "out_dir = " + r + "/out\n"
           "edit_spec = " + r + "/edit.spec\n"
           "seed = 11\n"
           "schedule.steps = 4\n"
           "schedule.beta_start = 0.003\n"
           "schedule.beta_end = 0.25\n"
           "model.frames = 3\n"
           "model.height = 4\n"
           "model.width = 4\n"
           "model.hidden = 8\n"
           "model.heads = 2\n"
           "model.blocks = 1\n"
           "model.prompt_dim = 6\n"
           "model.patch = 4\n"
           "model.lora_rank = 2\n"
           "model.vocab = 4\n"
           "model.mlp_mult = 2\n"
           "train.iterations = 3\n"
           "train.learning_rate = 0.001\n"
           "remix.target_words = sq\n"
           "prompt.ids = 0,1\n"
           "prompt.words = a,sq\n"
           "prompt.custom_index = 1\n";
}

PipelineConfig tiny_config(const TmpDir& tmp) {
    PipelineConfig cfg = PipelineConfig::parse(tiny_config_text(tmp), "tiny");
    write_frame_sequence(cfg.frames_dir, "frame", make_moving_square_clip(3, 16, 4, 2, 6, 1));
    return cfg;
}

bool file_bytes_equal(const std::string& a, const std::string& b) { return slurp(a) == slurp(b); }

}  // namespace

TEST_CASE("config parse reads every key") {
    std::string text =
        "frames_dir = /x/frames\n"
        "control_dir = /x/ctrl\n"
        "edit_control_dir = /x/ce\n"
        "checkpoint = /x/c.cvar\n"
        "store = /x/s.cvar\n"
        "out_dir = /x/out\n"
        "edit_spec = /x/e.spec\n"
        "control_kind = sketch\n"
        "seed = 42\n"
        "schedule.steps = 7\n"
        "schedule.beta_start = 0.001\n"
        "schedule.beta_end = 0.1\n"
        "\n"
        "# comment line\n"
        "model.frames = 4\n"
        "model.channels = 48\n"
        "model.height = 5\n"
        "model.width = 6\n"
        "model.hidden = 12\n"
        "model.heads = 3\n"
        "model.blocks = 2\n"
        "model.prompt_dim = 9\n"
        "model.patch = 4\n"
        "model.lora_rank = 3\n"
        "model.vocab = 5\n"
        "model.mlp_mult = 4\n"
        "train.iterations = 17\n"
        "train.learning_rate = 0.25\n"
        "train.batch_timesteps = 2\n"
        "train.optimizer = sgd\n"
        "train.lora = false\n"
        "train.token_embedding = true\n"
        "train.guide_temporal = false\n"
        "train.guide_full = true\n"
        "train.log = /x/log.csv\n"
        "train.base_word = 3\n"
        "remix.tau = 0.4\n"
        "remix.t_lo = 5\n"
        "remix.target_words = cat, road\n"
        "prompt.ids = 0, 2, 4\n"
        "prompt.words = a, cat, S*\n"
        "prompt.custom_index = 2\n";
    PipelineConfig c = PipelineConfig::parse(text, "mem");
    CHECK(c.frames_dir == "/x/frames");
    CHECK(c.control_dir == "/x/ctrl");
    CHECK(c.edit_control_dir == "/x/ce");
    CHECK(c.checkpoint_path == "/x/c.cvar");
    CHECK(c.store_path == "/x/s.cvar");
    CHECK(c.out_dir == "/x/out");
    CHECK(c.edit_spec_path == "/x/e.spec");
    CHECK(c.control_kind == "sketch");
    CHECK(c.seed == 42);
    CHECK(c.schedule_steps == 7);
    CHECK(c.schedule_beta_start == 0.001);
    CHECK(c.schedule_beta_end == 0.1);
    CHECK(c.model.frames == 4);
    CHECK(c.model.height == 5);
    CHECK(c.model.width == 6);
    CHECK(c.model.hidden == 12);
    CHECK(c.model.heads == 3);
    CHECK(c.model.blocks == 2);
    CHECK(c.model.prompt_dim == 9);
    CHECK(c.model.lora_rank == 3);
    CHECK(c.model.vocab == 5);
    CHECK(c.model.mlp_mult == 4);
    CHECK(c.train.iterations == 17);
    CHECK(c.train.learning_rate == 0.25);
    CHECK(c.train.batch_timesteps == 2);
    CHECK(c.train.optimizer == "sgd");
    CHECK_FALSE(c.train.train_lora);
    CHECK(c.train.train_token_embedding);
    CHECK_FALSE(c.train.train_guide_temporal);
    CHECK(c.train.train_guide_full);
    CHECK(c.train.log_path == "/x/log.csv");
    CHECK(c.train.base_word_id == 3);
    CHECK(c.remix.tau == 0.4);
    CHECK(c.remix.t_lo == 5);
    CHECK(c.remix.target_words == std::vector<std::string>{"cat", "road"});
    CHECK(c.prompt_ids == std::vector<int64_t>{0, 2, 4});
    CHECK(c.prompt_words == std::vector<std::string>{"a", "cat", "S*"});
    CHECK(c.prompt_custom_index == 2);

    CHECK_NOTHROW(c.validate());
}

TEST_CASE("config parse reports the offending line") {
    auto msg_of = [](const std::string& text) {
        try {
            PipelineConfig::parse(text, "mem");
            return std::string("(no throw)");
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
    };
    CHECK(msg_of("seed = 1\nnot a pair\n").find("mem:2:") != std::string::npos);
    CHECK(msg_of("bogus_key = 3\n").find("unknown key 'bogus_key'") != std::string::npos);
    CHECK(msg_of("\n\nseed = banana\n").find("mem:3:") != std::string::npos);
    CHECK(msg_of("model.heads = 2x\n").find("trailing characters") != std::string::npos);
    CHECK(msg_of("train.lora = maybe\n").find("true/false") != std::string::npos);
    CHECK(msg_of("seed = -4\n").find("non-negative") != std::string::npos);

    TmpDir tmp("cfgfile");
    spit(tmp.sub("p.cfg"), "seed = 1\n???\n");
    try {
        PipelineConfig::parse_file(tmp.sub("p.cfg"));
        FAIL("expected a throw");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
    CHECK_THROWS_AS(PipelineConfig::parse_file(tmp.sub("missing.cfg")), ConfigError);
}

TEST_CASE("config validation catches cross-field mistakes") {
    TmpDir tmp("cfgval");
    PipelineConfig base = PipelineConfig::parse(tiny_config_text(tmp), "tiny");
    CHECK_NOTHROW(base.validate());

    PipelineConfig c = base;
    c.prompt_words.pop_back();
    CHECK_THROWS_AS(c.validate(), ConfigError);

    c = base;
    c.prompt_ids = {0, 9};
    CHECK_THROWS_AS(c.validate(), ConfigError);

    c = base;
    c.prompt_custom_index = 2;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    c = base;
    c.schedule_steps = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    c = base;
    c.schedule_beta_end = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    c = base;
    c.control_kind = "depth";
    CHECK_THROWS_AS(c.validate(), ConfigError);

    c = base;
    c.prompt_ids.clear();
    c.prompt_words.clear();
    CHECK_THROWS_AS(c.validate(), ConfigError);

    c = base;
    c.model.heads = 5;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    c = base;
    c.train.optimizer = "lbfgs";
    CHECK_THROWS_AS(c.validate(), ConfigError);

    c = base;
    c.remix.tau = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("moving square fixture geometry") {
    Tensor clip = make_moving_square_clip();
    CHECK(clip.shape == std::vector<int64_t>{8, 3, 32, 32});
    for (int64_t f = 0; f < 8; ++f) {
        int64_t x = 4 + f;
        double sum = 0;
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t yy = 0; yy < 32; ++yy)
                for (int64_t xx = 0; xx < 32; ++xx) {
                    double v = clip.at(f, c, yy, xx);
                    bool inside = yy >= 12 && yy < 20 && xx >= x && xx < x + 8;
                    CHECK(v == (inside ? 1.0 : 0.0));
                    sum += v;
                }
        CHECK(sum == 3 * 64);
    }
    CHECK_THROWS_AS(make_moving_square_clip(8, 32, 8, 28, 12, 1), std::domain_error);
    CHECK_THROWS_AS(make_moving_square_clip(8, 32, 8, 4, 30, 1), std::domain_error);
}

TEST_CASE("frame sequence io round trips through quantization") {
    TmpDir tmp("io");
    Rng rng(5);
    Tensor clip({2, 3, 8, 8});
    for (auto& v : clip.data) v = rng.uniform();
    write_frame_sequence(tmp.sub("rgb"), "frame", clip);
    CHECK(fs::exists(tmp.sub("rgb") + "/frame_0000.png"));
    CHECK(fs::exists(tmp.sub("rgb") + "/frame_0001.png"));
    Tensor back = read_frame_sequence(tmp.sub("rgb"), "frame", 2);
    CHECK(back.shape == clip.shape);
    CHECK(max_abs_diff(back, clip) <= 0.5 / 255 + 1e-12);

    Tensor gray({2, 1, 8, 8});
    for (auto& v : gray.data) v = rng.uniform();
    write_frame_sequence(tmp.sub("gray"), "ctrl", gray);
    Tensor gback = read_gray_sequence(tmp.sub("gray"), "ctrl", 2);
    CHECK(max_abs_diff(gback, gray) <= 0.5 / 255 + 1e-12);

    for (const auto& e : fs::recursive_directory_iterator(tmp.root))
        CHECK(e.path().string().find(".partial") == std::string::npos);

    try {
        read_frame_sequence(tmp.sub("rgb"), "frame", 4);
        FAIL("expected a throw");
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        CHECK(msg.find("frame_0002.png") != std::string::npos);
        CHECK(msg.find("frame_0003.png") != std::string::npos);
    }
}

TEST_CASE("cosine and temporal consistency oracles") {
    Tensor a({2}, {1.0, 0.0});
    Tensor b({2}, {std::sqrt(0.5), std::sqrt(0.5)});
    Tensor c({2}, {0.0, 1.0});
    CHECK(temporal_consistency({a, b, c}) == doctest::Approx(std::sqrt(2.0) / 2).epsilon(1e-12));
    CHECK(temporal_consistency({a, c}) == 0.0);
    CHECK(temporal_consistency({a, a, a}) == 1.0);

    Tensor z({2});
    CHECK(cosine_similarity(z, z) == 1.0);
    CHECK(cosine_similarity(z, a) == 0.0);
    CHECK(cosine_similarity(a, a) == 1.0);

    CHECK_THROWS_AS(temporal_consistency({a}), std::domain_error);
    CHECK_THROWS_AS(temporal_consistency(std::vector<Tensor>{}), std::domain_error);
}

TEST_CASE("latent mean embedder") {
    LatentMeanEmbedder emb(4);
    Tensor black({3, 8, 8});
    Tensor e = emb.embed(black);
    CHECK(e.shape == std::vector<int64_t>{48});
    for (double v : e.data) CHECK(v == 0.0);
    CHECK_FALSE(emb.has_text_branch());

    // width 5 so the square is not patch-aligned (a patch-width square pools
    // to the same embedding at every x offset)
    Tensor clip = make_moving_square_clip(3, 16, 5, 2, 6, 1);
    Tensor same({3, 3, 16, 16});
    for (int64_t f = 0; f < 3; ++f)
        std::copy_n(clip.data.begin(), 3 * 16 * 16, same.data.begin() + f * 3 * 16 * 16);
    CHECK(temporal_consistency(same, emb) == 1.0);

    double moving = temporal_consistency(clip, emb);
    CHECK(moving < 1.0);
    CHECK(moving >= -1.0);
}

TEST_CASE("extract stage writes control maps and reruns byte-identically") {
    TmpDir tmp("extract");
    PipelineConfig cfg = tiny_config(tmp);
    cmd_extract(cfg);
    for (int i = 0; i < 3; ++i) CHECK(fs::exists(indexed_path(cfg.control_dir, "ctrl", i)));

    std::string first = slurp(indexed_path(cfg.control_dir, "ctrl", 1));
    cmd_extract(cfg);
    CHECK(slurp(indexed_path(cfg.control_dir, "ctrl", 1)) == first);

    Tensor ctrl = read_gray_sequence(cfg.control_dir, "ctrl", 3);
    double peak = 0;
    for (double v : ctrl.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        peak = std::max(peak, v);
    }
    CHECK(peak == 1.0);

    // black frames give all-zero control maps
    TmpDir tmp2("extract0");
    PipelineConfig dark = PipelineConfig::parse(tiny_config_text(tmp2), "tiny");
    write_frame_sequence(dark.frames_dir, "frame", Tensor({3, 3, 16, 16}));
    cmd_extract(dark);
    Tensor zctrl = read_gray_sequence(dark.control_dir, "ctrl", 3);
    for (double v : zctrl.data) CHECK(v == 0.0);
}

TEST_CASE("edit-control applies spec files to the control sequence") {
    TmpDir tmp("editctl");
    PipelineConfig cfg = tiny_config(tmp);
    cmd_extract(cfg);

    spit(cfg.edit_spec_path, "# identity\ndx = 0\ndy = 0\nsx = 1\nsy = 1\n");
    cmd_edit_control(cfg);
    for (int i = 0; i < 3; ++i)
        CHECK(file_bytes_equal(indexed_path(cfg.control_dir, "ctrl", i),
                               indexed_path(cfg.edit_control_dir, "ctrl", i)));

    spit(cfg.edit_spec_path, "dx = 5\n");
    cmd_edit_control(cfg);
    Tensor src = read_gray_sequence(cfg.control_dir, "ctrl", 3);
    Tensor moved = read_gray_sequence(cfg.edit_control_dir, "ctrl", 3);
    for (int64_t f = 0; f < 3; ++f) {
        BBox sb = detect_bbox(control_frame({src, "edge"}, f));
        BBox mb = detect_bbox(control_frame({moved, "edge"}, f));
        CHECK(mb.x_min == sb.x_min + 5);
        CHECK(mb.x_max == sb.x_max + 5);
        CHECK(mb.y_min == sb.y_min);
        CHECK(mb.y_max == sb.y_max);
    }

    spit(cfg.edit_spec_path, "dx = 1\nwat\n");
    try {
        cmd_edit_control(cfg);
        FAIL("expected a throw");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }

    spit(cfg.edit_spec_path, "dx = 1\nscale = 2\n");
    try {
        cmd_edit_control(cfg);
        FAIL("expected a throw");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("unknown key 'scale'") != std::string::npos);
    }

    spit(cfg.edit_spec_path, "dx = 1\nsx = 0\n");
    CHECK_THROWS_AS(cmd_edit_control(cfg), ConfigError);

    PipelineConfig nospec = cfg;
    nospec.edit_spec_path = tmp.sub("none.spec");
    CHECK_THROWS_AS(cmd_edit_control(nospec), ConfigError);
}

TEST_CASE("stage order is enforced before side effects") {
    TmpDir tmp("order");
    PipelineConfig cfg = tiny_config(tmp);
    cmd_extract(cfg);

    try {
        cmd_invert(cfg);
        FAIL("expected a throw");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("customize") != std::string::npos);
    }
    CHECK_FALSE(fs::exists(cfg.store_path));

    cmd_customize(cfg);
    CHECK(fs::exists(cfg.checkpoint_path));

    try {
        cmd_edit(cfg);
        FAIL("expected a throw");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("invert") != std::string::npos);
    }
    CHECK_FALSE(fs::exists(cfg.out_dir));

    CHECK_THROWS_AS(cmd_metrics(cfg), ConfigError);

    // a checkpoint from a different seed is rejected before inversion
    PipelineConfig other = cfg;
    other.seed = 12;
    try {
        cmd_invert(other);
        FAIL("expected a throw");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("hash") != std::string::npos);
    }
}

TEST_CASE("full pipeline runs end to end deterministically") {
    TmpDir ta("runA"), tb("runB");
    PipelineConfig a = tiny_config(ta);
    PipelineConfig b = tiny_config(tb);

    for (const PipelineConfig* cfg : {&a, &b}) {
        spit(cfg->edit_spec_path, "dx = 1\n");
        cmd_extract(*cfg);
        cmd_edit_control(*cfg);
        cmd_customize(*cfg);
        cmd_invert(*cfg);
        cmd_edit(*cfg);
    }

    CHECK(file_bytes_equal(a.checkpoint_path, b.checkpoint_path));
    CHECK(file_bytes_equal(a.store_path, b.store_path));
    for (int i = 0; i < 3; ++i) {
        CHECK(fs::exists(indexed_path(a.out_dir, "out", i)));
        CHECK(file_bytes_equal(indexed_path(a.out_dir, "out", i),
                               indexed_path(b.out_dir, "out", i)));
    }

    MetricsReport report = cmd_metrics(a);
    CHECK(report.tem_con >= -1.0);
    CHECK(report.tem_con <= 1.0);
    CHECK_FALSE(report.fram_acc_available);

    // a different seed produces a different edit
    PipelineConfig c = tiny_config(ta);
    c.seed = 99;
    c.checkpoint_path = ta.sub("ckpt99.cvar");
    c.store_path = ta.sub("store99.cvar");
    c.out_dir = ta.sub("out99");
    cmd_customize(c);
    cmd_invert(c);
    cmd_edit(c);
    CHECK_FALSE(file_bytes_equal(indexed_path(a.out_dir, "out", 0),
                                 indexed_path(c.out_dir, "out", 0)));
}

TEST_CASE("cli binary maps errors to exit codes") {
    TmpDir tmp("cli");
    std::string err = tmp.sub("err.txt");
    auto run = [&](const std::string& args) {
        std::string cmd = std::string(CVID_BIN) + " " + args + " >" + tmp.sub("out.txt") +
                          " 2>" + err;
        int st = std::system(cmd.c_str());
        REQUIRE(WIFEXITED(st));
        return WEXITSTATUS(st);
    };

    CHECK(run("") == 2);
    CHECK(run("frobnicate --config /nonexistent") == 2);
    CHECK(run("--help") == 0);

    PipelineConfig cfg = tiny_config(tmp);
    std::string cfg_path = tmp.sub("pipe.cfg");
    spit(cfg_path, tiny_config_text(tmp));

    CHECK(run("extract --config " + cfg_path) == 0);
    CHECK(fs::exists(indexed_path(cfg.control_dir, "ctrl", 2)));

    std::string bad_cfg = tmp.sub("bad.cfg");
    spit(bad_cfg, "seed = 1\ngarbage line\n");
    CHECK(run("extract --config " + bad_cfg) == 2);
    CHECK(slurp(err).find(":2:") != std::string::npos);

    CHECK(run("metrics --config " + cfg_path) == 2);  // nothing in out_dir yet

    // corrupt PNG in out_dir is a runtime failure, not a config error
    fs::create_directories(cfg.out_dir);
    spit(indexed_path(cfg.out_dir, "out", 0), "this is not a png");
    spit(indexed_path(cfg.out_dir, "out", 1), "this is not a png");
    spit(indexed_path(cfg.out_dir, "out", 2), "this is not a png");
    CHECK(run("metrics --config " + cfg_path) == 1);
}
