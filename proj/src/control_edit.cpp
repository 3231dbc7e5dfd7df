#include "cvid/control_edit.hpp"

#include <algorithm>
#include <cmath>

#include "cvid/kernels.hpp"

namespace cvid {

void BBox::validate(int64_t W, int64_t H) const {
    if (x_min > x_max || y_min > y_max)
        throw std::invalid_argument("BBox: min corner must not exceed max corner");
    if (x_min < 0 || y_min < 0 || x_max >= W || y_max >= H)
        throw std::invalid_argument("BBox: outside frame bounds");
}

void TransformParams::validate() const {
    if (!(sx > 0.0) || !(sy > 0.0)) throw std::domain_error("TransformParams: scales must be > 0");
}

void EditSpec::validate() const {
    if (has_frame == has_params)
        throw std::invalid_argument("EditSpec: exactly one of edited frame or params required");
    if (has_params) params.validate();
    if (has_frame && edited_frame.ndim() != 2)
        throw std::invalid_argument("EditSpec: edited frame must be a [H,W] map");
}

ControlSequence extract_control(const Tensor& frames, const std::string& kind,
                                std::vector<int64_t>* empty_frames, double fg_thresh) {
    if (kind == "pose-raster")
        throw std::invalid_argument("pose rasters are loaded from disk, not extracted");
    if (kind != "edge" && kind != "sketch")
        throw std::domain_error("extract_control: kind must be edge, sketch or pose-raster");
    if (frames.ndim() != 4 || frames.dim(0) < 1 || frames.dim(1) != 3)
        throw std::invalid_argument("extract_control: frames must be [F,3,H,W]");
    int64_t F = frames.dim(0), H = frames.dim(2), W = frames.dim(3);

    ControlSequence out;
    out.kind = kind;
    out.maps = Tensor({F, 1, H, W});
    std::vector<char> empty(F, 0);

#pragma omp parallel for schedule(static) if (kernels::parallel_enabled())
    for (int64_t f = 0; f < F; ++f) {
        std::vector<double> fg(H * W, 0.0);
        bool any = false;
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                double lum = 0.2126 * frames.at(f, 0, y, x) + 0.7152 * frames.at(f, 1, y, x) +
                             0.0722 * frames.at(f, 2, y, x);
                if (lum > fg_thresh) {
                    fg[y * W + x] = 1.0;
                    any = true;
                }
            }
        if (!any) {
            empty[f] = 1;
            continue;
        }
        double* dst = out.maps.data.data() + f * H * W;
        double mx = 0.0;
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                double xl = fg[y * W + std::max<int64_t>(x - 1, 0)];
                double xr = fg[y * W + std::min(x + 1, W - 1)];
                double yu = fg[std::max<int64_t>(y - 1, 0) * W + x];
                double yd = fg[std::min(y + 1, H - 1) * W + x];
                double den_x = (x > 0 && x < W - 1) ? 2.0 : 1.0;
                double den_y = (y > 0 && y < H - 1) ? 2.0 : 1.0;
                double gx = (xr - xl) / den_x;
                double gy = (yd - yu) / den_y;
                double g = std::sqrt(gx * gx + gy * gy) * fg[y * W + x];
                dst[y * W + x] = g;
                mx = std::max(mx, g);
            }
        if (mx > 0.0)
            for (int64_t i = 0; i < H * W; ++i) dst[i] /= mx;
    }
    if (empty_frames)
        for (int64_t f = 0; f < F; ++f)
            if (empty[f]) empty_frames->push_back(f);
    return out;
}

BBox detect_bbox(const Tensor& ctrl_frame, double thresh) {
    if (ctrl_frame.ndim() != 2) throw std::invalid_argument("detect_bbox: [H,W] frame required");
    int64_t H = ctrl_frame.dim(0), W = ctrl_frame.dim(1);
    BBox b{W, H, -1, -1};
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            if (ctrl_frame.at(y, x) > thresh) {
                b.x_min = std::min(b.x_min, x);
                b.x_max = std::max(b.x_max, x);
                b.y_min = std::min(b.y_min, y);
                b.y_max = std::max(b.y_max, y);
            }
    if (b.x_max < 0) throw NoObjectError("detect_bbox: no pixels above the activity threshold");
    return b;
}

TransformParams estimate_transform(const BBox& src, const BBox& edited) {
    if (src.x_min > src.x_max || src.y_min > src.y_max || edited.x_min > edited.x_max ||
        edited.y_min > edited.y_max)
        throw std::invalid_argument("estimate_transform: malformed box");
    if (src.width() < 1 || src.height() < 1)
        throw std::domain_error("estimate_transform: degenerate source box");
    TransformParams p;
    p.dx = edited.cx() - src.cx();
    p.dy = edited.cy() - src.cy();
    p.sx = (double)edited.width() / (double)src.width();
    p.sy = (double)edited.height() / (double)src.height();
    return p;
}

Tensor apply_transform(const Tensor& ctrl_frame, const TransformParams& params, const BBox& pivot) {
    if (ctrl_frame.ndim() != 2)
        throw std::invalid_argument("apply_transform: [H,W] frame required");
    params.validate();
    int64_t H = ctrl_frame.dim(0), W = ctrl_frame.dim(1);
    pivot.validate(W, H);
    double cx = pivot.cx(), cy = pivot.cy();
    Tensor out({H, W});
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            int64_t xs = std::llround(cx + ((double)x - params.dx - cx) / params.sx);
            int64_t ys = std::llround(cy + ((double)y - params.dy - cy) / params.sy);
            if (xs < 0 || xs >= W || ys < 0 || ys >= H) continue;
            out.at(y, x) = ctrl_frame.at(ys, xs);
        }
    return out;
}

Tensor control_frame(const ControlSequence& ctrl, int64_t f) {
    if (ctrl.maps.ndim() != 4 || ctrl.maps.dim(1) != 1)
        throw std::invalid_argument("control_frame: maps must be [F,1,H,W]");
    if (f < 0 || f >= ctrl.maps.dim(0)) throw std::invalid_argument("control_frame: index");
    int64_t H = ctrl.maps.dim(2), W = ctrl.maps.dim(3);
    Tensor out({H, W});
    std::copy(ctrl.maps.data.begin() + f * H * W, ctrl.maps.data.begin() + (f + 1) * H * W,
              out.data.begin());
    return out;
}

ControlSequence propagate(const ControlSequence& ctrl, const EditSpec& spec,
                          std::vector<int64_t>* warned) {
    spec.validate();
    if (ctrl.maps.ndim() != 4 || ctrl.maps.dim(1) != 1)
        throw std::invalid_argument("propagate: maps must be [F,1,H,W]");
    int64_t F = ctrl.maps.dim(0), H = ctrl.maps.dim(2), W = ctrl.maps.dim(3);

    TransformParams params = spec.params;
    if (spec.has_frame) {
        if (spec.edited_frame.dim(0) != H || spec.edited_frame.dim(1) != W)
            throw std::invalid_argument("propagate: edited frame dims disagree with the control");
        BBox src = detect_bbox(control_frame(ctrl, 0));
        BBox edited = detect_bbox(spec.edited_frame);
        params = estimate_transform(src, edited);
    }

    // pivots first: bbox detection can fail per frame, and throwing from
    // inside the parallel warp loop is not an option
    std::vector<BBox> pivots(F);
    std::vector<char> skip(F, 0);
    for (int64_t f = 0; f < F; ++f) {
        try {
            pivots[f] = detect_bbox(control_frame(ctrl, f));
        } catch (const NoObjectError&) {
            skip[f] = 1;
            if (warned) warned->push_back(f);
        }
    }

    ControlSequence out;
    out.kind = ctrl.kind;
    out.maps = Tensor({F, 1, H, W});
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled())
    for (int64_t f = 0; f < F; ++f) {
        Tensor frame = control_frame(ctrl, f);
        Tensor moved = skip[f] ? frame : apply_transform(frame, params, pivots[f]);
        std::copy(moved.data.begin(), moved.data.end(), out.maps.data.begin() + f * H * W);
    }
    return out;
}

}  // namespace cvid
