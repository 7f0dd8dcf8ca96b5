#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "lbd/errors.hpp"
#include "lbd/rng.hpp"
#include "lbd/tensor.hpp"

namespace lbd {

/// A recorded latent backdoor: binary mask (position/shape), pixel pattern,
/// and the layer whose features the pattern was tuned against.
struct TriggerSpec {
    Tensor mask;     // image-shaped, elements exactly 0 or 1
    Tensor pattern;  // image-shaped, values in [0,1]
    int inject_layer = 0;
    std::string target_name;
    uint64_t seed = 0;
};

inline void require_binary_mask(const Tensor& m) {
    const double* p = m.data();
    for (int64_t i = 0; i < m.size(); ++i)
        if (p[i] != 0.0 && p[i] != 1.0) throw ShapeError("non-binary-mask");
}

inline int64_t mask_area(const Tensor& m) {
    const double* p = m.data();
    int64_t n = 0;
    for (int64_t i = 0; i < m.size(); ++i) n += (p[i] == 1.0);
    return n;
}

/// Square mask at the bottom-right covering ~`area` of the image
/// (side = round(sqrt(area * H * W))), replicated across channels.
inline Tensor make_bottom_right_mask(const std::vector<int>& image_shape, double area = 0.04) {
    if (image_shape.size() != 3) throw ShapeError("mask wants an image shape [c,h,w]");
    int c = image_shape[0], h = image_shape[1], w = image_shape[2];
    int side = static_cast<int>(std::lround(std::sqrt(area * h * w)));
    side = std::max(1, std::min(side, std::min(h, w)));
    Tensor m(std::vector<int>{c, h, w});
    double* p = m.mutable_data();
    for (int ic = 0; ic < c; ++ic)
        for (int y = h - side; y < h; ++y)
            for (int x = w - side; x < w; ++x)
                p[(static_cast<int64_t>(ic) * h + y) * w + x] = 1.0;
    return m;
}

inline Tensor random_pattern(const std::vector<int>& image_shape, uint64_t seed) {
    Tensor t(image_shape);
    Rng rng(seed);
    double* p = t.mutable_data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = rng.uniform();
    return t;
}

/// A(x, m, pattern) = (1 - m) .* x + m .* pattern, elementwise.
inline Tensor apply_trigger_image(const Tensor& x, const Tensor& mask, const Tensor& pattern) {
    require_same_shape(x, mask, "apply_trigger mask");
    require_same_shape(x, pattern, "apply_trigger pattern");
    require_binary_mask(mask);
    Tensor out = x;
    double* o = out.mutable_data();
    const double* m = mask.data();
    const double* d = pattern.data();
    const double* xp = x.data();
    for (int64_t i = 0; i < out.size(); ++i) o[i] = (1.0 - m[i]) * xp[i] + m[i] * d[i];
    return out;
}

inline Tensor apply_trigger_image(const Tensor& x, const TriggerSpec& t) {
    return apply_trigger_image(x, t.mask, t.pattern);
}

/// Stamps the trigger on every image of a batch [n,c,h,w].
inline Tensor apply_trigger_batch(const Tensor& batch, const TriggerSpec& t) {
    if (batch.ndim() != 4) throw ShapeError("shape-mismatch: batch must be [n,c,h,w]");
    if (batch.dim(1) != t.mask.dim(0) || batch.dim(2) != t.mask.dim(1) ||
        batch.dim(3) != t.mask.dim(2))
        throw ShapeError("shape-mismatch: trigger vs batch image shape");
    require_binary_mask(t.mask);
    Tensor out = batch;
    double* o = out.mutable_data();
    const double* m = t.mask.data();
    const double* d = t.pattern.data();
    const double* xp = batch.data();
    int64_t per = t.mask.size();
    for (int n = 0; n < batch.dim(0); ++n) {
        int64_t off = n * per;
        for (int64_t i = 0; i < per; ++i)
            o[off + i] = (1.0 - m[i]) * xp[off + i] + m[i] * d[i];
    }
    return out;
}

}  // namespace lbd
