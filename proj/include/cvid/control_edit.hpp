#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "cvid/structure_guide.hpp"

namespace cvid {

struct NoObjectError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BBox {
    int64_t x_min = 0, y_min = 0, x_max = 0, y_max = 0;  // inclusive pixel coords

    int64_t width() const { return x_max - x_min + 1; }
    int64_t height() const { return y_max - y_min + 1; }
    double cx() const { return (x_min + x_max) / 2.0; }
    double cy() const { return (y_min + y_max) / 2.0; }
    bool operator==(const BBox&) const = default;

    void validate(int64_t W, int64_t H) const;
};

struct TransformParams {
    double dx = 0.0, dy = 0.0;
    double sx = 1.0, sy = 1.0;

    void validate() const;  // sx, sy > 0
    bool is_identity() const { return dx == 0 && dy == 0 && sx == 1 && sy == 1; }
    TransformParams inverse() const { return {-dx, -dy, 1.0 / sx, 1.0 / sy}; }
};

struct EditSpec {
    bool has_frame = false;
    Tensor edited_frame{std::vector<int64_t>{0}};  // user-edited control frame 0, [H', W']
    bool has_params = false;
    TransformParams params;
    std::vector<std::string> target_words;
    std::string target_prompt;

    void validate() const;  // exactly one of {edited frame, params}
};

constexpr double kActivityThreshold = 0.05;

// Luminance-threshold segmentation followed by a gradient-magnitude edge map,
// max-normalized per frame. Frames with no foreground come back all zero and
// their indices are appended to *empty_frames.
ControlSequence extract_control(const Tensor& frames, const std::string& kind,
                                std::vector<int64_t>* empty_frames = nullptr,
                                double fg_thresh = 0.5);

// Tight box over pixels strictly above the activity threshold.
BBox detect_bbox(const Tensor& ctrl_frame, double thresh = kActivityThreshold);

TransformParams estimate_transform(const BBox& src, const BBox& edited);

// Nearest-neighbor inverse warp: scale about the pivot's center, then
// translate. Pivot must be this frame's own detected bbox.
Tensor apply_transform(const Tensor& ctrl_frame, const TransformParams& params, const BBox& pivot);

// Applies the edit to every frame with its own per-frame pivot. Frames with
// no object pass through unchanged and are recorded in *warned.
ControlSequence propagate(const ControlSequence& ctrl, const EditSpec& spec,
                          std::vector<int64_t>* warned = nullptr);

Tensor control_frame(const ControlSequence& ctrl, int64_t f);

}  // namespace cvid
