#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "cvid/attention_remix.hpp"
#include "cvid/control_edit.hpp"
#include "cvid/customize.hpp"

namespace cvid {

// Bad configuration, malformed spec files, missing stage inputs. The CLI maps
// this to exit code 2; every other exception is a runtime failure (exit 1).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PipelineConfig {
    std::string frames_dir;
    std::string control_dir;
    std::string edit_control_dir;  // empty: cmd_edit falls back to control_dir
    std::string checkpoint_path;
    std::string store_path;
    std::string out_dir;
    std::string edit_spec_path;
    std::string control_kind = "edge";

    DenoiserConfig model;
    TrainConfig train;
    RemixConfig remix;

    int schedule_steps = 50;
    // 0/0 picks the scaled default betas for schedule_steps
    double schedule_beta_start = 0.0;
    double schedule_beta_end = 0.0;
    uint64_t seed = 0;

    std::vector<int64_t> prompt_ids;
    std::vector<std::string> prompt_words;
    int prompt_custom_index = -1;

    static PipelineConfig parse(const std::string& text, const std::string& origin);
    static PipelineConfig parse_file(const std::string& path);
    void validate() const;  // throws ConfigError
};

// Geometry half of an edit spec file (key=value lines, same grammar as the
// config). Unknown keys and malformed lines report their line number.
EditSpec parse_edit_spec_file(const std::string& path);

// dir/prefix_{0000..count-1}.png stacked to [F,3,H,W]; missing files raise a
// ConfigError listing every absent name.
Tensor read_frame_sequence(const std::string& dir, const std::string& prefix, int64_t count);
// grayscale variant, [F,1,H,W]
Tensor read_gray_sequence(const std::string& dir, const std::string& prefix, int64_t count);
// writes frames[f] to dir/prefix_{f:04d}.png, creating dir; rgb for rank-4
// [F,3,H,W] input, gray for [F,1,H,W]
void write_frame_sequence(const std::string& dir, const std::string& prefix,
                          const Tensor& frames);

// white square marching right: frame f holds a square x 8 square with its top
// left corner at (x0 + step*f, y0)
Tensor make_moving_square_clip(int64_t frames = 8, int64_t size = 32, int64_t square = 8,
                               int64_t x0 = 4, int64_t y0 = 12, int64_t step = 1);

class Embedder {
  public:
    virtual ~Embedder() = default;
    virtual Tensor embed(const Tensor& frame) const = 0;  // [3,H',W'] -> [dim]
    // Frame-Accuracy needs a text branch; the shipped embedder has none, so
    // the metric is reported as unavailable.
    virtual bool has_text_branch() const { return false; }
};

// mean over latent positions of the orthonormal patch encoding
class LatentMeanEmbedder final : public Embedder {
  public:
    explicit LatentMeanEmbedder(int64_t patch) : ae_(patch) {}
    Tensor embed(const Tensor& frame) const override;

  private:
    PatchAutoencoder ae_;
};

// zero-safe cosine: two zero vectors are identical (1), one zero vector is
// orthogonal to anything else (0)
double cosine_similarity(const Tensor& a, const Tensor& b);

// mean cosine similarity over the F-1 consecutive pairs; F < 2 is a domain
// error
double temporal_consistency(const std::vector<Tensor>& embeddings);
double temporal_consistency(const Tensor& frames, const Embedder& embedder);

struct MetricsReport {
    double tem_con = 0.0;
    bool fram_acc_available = false;
    double fram_acc = 0.0;
};

// Stage commands. Each validates its inputs before any side effect and
// throws ConfigError when a prerequisite artifact is missing.
void cmd_extract(const PipelineConfig& cfg);
void cmd_edit_control(const PipelineConfig& cfg);
void cmd_customize(const PipelineConfig& cfg);
void cmd_invert(const PipelineConfig& cfg);
void cmd_edit(const PipelineConfig& cfg);
MetricsReport cmd_metrics(const PipelineConfig& cfg);

}  // namespace cvid
