#include "semalign/overlay.hpp"

#include "semalign/errors.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace semalign {

OverlayResult render_overlay(const Tensor<float>& image, const LabelMap& pred, const LabelMap* gt, double alpha) {
    const Index H = image.h(), W = image.w();
    if (image.n() != 1 || image.c() != 3) throw ConfigError("render_overlay expects one RGB image");
    if (pred.n != 1 || pred.h != H || pred.w != W) throw ConfigError("render_overlay: prediction size mismatch");
    if (gt && (gt->n != 1 || gt->h != H || gt->w != W)) throw ConfigError("render_overlay: mask size mismatch");

    OverlayResult out;
    out.image.width = static_cast<int>(W);
    out.image.height = static_cast<int>(H);
    out.image.channels = 3;
    out.image.pixels.resize(static_cast<std::size_t>(H * W * 3));

    auto fg = [](std::uint8_t v) { return v != 0 && v != LabelMap::kIgnore; };
    auto boundary = [&](Index y, Index x) {
        if (!fg(pred(0, y, x))) return false;
        const std::array<std::pair<Index, Index>, 4> nb{{{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}}};
        for (auto [ny, nx] : nb)
            if (ny < 0 || nx < 0 || ny >= H || nx >= W || !fg(pred(0, ny, nx))) return true;
        return false;
    };

    for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
            std::array<double, 3> rgb{image(0, 0, y, x), image(0, 1, y, x), image(0, 2, y, x)};
            const std::uint8_t p = pred(0, y, x);
            const std::uint8_t g = gt ? (*gt)(0, y, x) : p;
            if (gt && g != LabelMap::kIgnore && p != g) ++out.disagreement;
            std::array<double, 3> tint{};
            bool fill = true;
            if (fg(p) && (!gt || p == g))
                tint = {0.1, 0.85, 0.2};
            else if (fg(p))
                tint = {0.95, 0.15, 0.1};
            else if (gt && fg(g))
                tint = {0.15, 0.35, 0.95};
            else
                fill = false;
            if (boundary(y, x)) {
                rgb = {1.0, 0.95, 0.0};
            } else if (fill) {
                for (int c = 0; c < 3; ++c) rgb[c] = (1 - alpha) * rgb[c] + alpha * tint[c];
            }
            for (int c = 0; c < 3; ++c)
                out.image.pixels[static_cast<std::size_t>((y * W + x) * 3 + c)] =
                    static_cast<std::uint8_t>(std::lround(std::clamp(rgb[c], 0.0, 1.0) * 255.0));
        }
    return out;
}

}  // namespace semalign
