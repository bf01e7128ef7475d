#include "semalign/data.hpp"

#include "semalign/errors.hpp"
#include "semalign/png_io.hpp"
#include "semalign/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace semalign {

namespace fs = std::filesystem;

DataSplit parse_split(const std::string& name) {
    if (name == "train") return DataSplit::train;
    if (name == "test") return DataSplit::test;
    throw ConfigError("unknown split '" + name + "' (expected train or test)");
}

const char* to_string(DataSplit split) { return split == DataSplit::train ? "train" : "test"; }

namespace {

std::vector<fs::path> list_pngs(const fs::path& dir) {
    std::vector<fs::path> files;
    if (!fs::is_directory(dir)) return files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".png")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.stem() < b.stem(); });
    return files;
}

Tensor<float> to_tensor(const RawImage& raw) {
    Tensor<float> t(1, 3, raw.height, raw.width);
    for (Index y = 0; y < raw.height; ++y)
        for (Index x = 0; x < raw.width; ++x)
            for (Index c = 0; c < 3; ++c)
                t(0, c, y, x) =
                    static_cast<float>(raw.pixels[static_cast<std::size_t>((y * raw.width + x) * 3 + c)]) /
                    255.0f;
    return t;
}

LabelMap to_mask(const RawImage& raw, int num_classes, const std::string& id) {
    LabelMap m(1, raw.height, raw.width);
    for (std::size_t i = 0; i < raw.pixels.size(); ++i) {
        const std::uint8_t v = raw.pixels[i];
        if (v >= num_classes && v != LabelMap::kIgnore)
            throw DataError("mask '" + id + "' has value " + std::to_string(v) +
                            " outside {0.." + std::to_string(num_classes - 1) + ", 255}");
        m.data[i] = v;
    }
    return m;
}

std::vector<Sample> load_impl(const fs::path& root, DataSplit split, int num_classes,
                              bool require_masks) {
    const fs::path image_dir = root / "images" / to_string(split);
    const fs::path mask_dir = root / "masks" / to_string(split);
    const auto files = list_pngs(image_dir);
    if (files.empty()) throw DataError("no samples found in " + image_dir.string());
    std::vector<Sample> samples;
    samples.reserve(files.size());
    for (const auto& file : files) {
        Sample s;
        s.id = file.stem().string();
        s.image = to_tensor(read_png(file, 3));
        const fs::path mask_path = mask_dir / file.filename();
        if (fs::exists(mask_path)) {
            s.mask = to_mask(read_png(mask_path, 1), num_classes, s.id);
            if (s.mask->h != s.image.h() || s.mask->w != s.image.w())
                throw DataError("mask '" + s.id + "' size differs from its image");
        } else if (require_masks) {
            throw DataError("missing mask for image '" + s.id + "' (expected " +
                            mask_path.string() + ")");
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

}  // namespace

std::vector<Sample> load_dataset(const fs::path& root, DataSplit split, int num_classes) {
    return load_impl(root, split, num_classes, true);
}

std::vector<Sample> load_images(const fs::path& root, DataSplit split, int num_classes) {
    return load_impl(root, split, num_classes, false);
}

void write_dataset(const fs::path& root, DataSplit split, const std::vector<Sample>& samples) {
    for (const auto& s : samples) {
        RawImage img{static_cast<int>(s.image.w()), static_cast<int>(s.image.h()), 3, {}};
        img.pixels.resize(static_cast<std::size_t>(img.width * img.height * 3));
        for (Index y = 0; y < img.height; ++y)
            for (Index x = 0; x < img.width; ++x)
                for (Index c = 0; c < 3; ++c)
                    img.pixels[static_cast<std::size_t>((y * img.width + x) * 3 + c)] =
                        static_cast<std::uint8_t>(
                            std::lround(std::clamp(s.image(0, c, y, x), 0.0f, 1.0f) * 255.0f));
        write_png(root / "images" / to_string(split) / (s.id + ".png"), img);
        if (s.mask) {
            RawImage m{static_cast<int>(s.mask->w), static_cast<int>(s.mask->h), 1, s.mask->data};
            write_png(root / "masks" / to_string(split) / (s.id + ".png"), m);
        }
    }
}

std::size_t labeled_count(std::size_t n, double ratio) {
    // Tolerance keeps products such as 0.3 * 5 = 1.4999999999999998 on the half-up side.
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 0.5 + 1e-9));
}

SplitManifest make_ssl_split(const std::vector<std::string>& ids, double ratio,
                             std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio <= 1.0))
        throw ConfigError("split ratio must be in (0, 1], got " + format_double(ratio));
    if (ids.empty()) throw ConfigError("cannot split an empty id list");
    std::set<std::string> seen;
    for (const auto& id : ids)
        if (!seen.insert(id).second) throw ConfigError("duplicate id '" + id + "' in split input");

    std::vector<std::string> order(ids.begin(), ids.end());
    std::sort(order.begin(), order.end());
    Rng rng(splitmix64(seed));
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t n_lab = labeled_count(order.size(), ratio);
    SplitManifest m;
    m.seed = seed;
    m.ratio = ratio;
    m.labeled_ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_lab));
    m.unlabeled_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(n_lab), order.end());
    std::sort(m.labeled_ids.begin(), m.labeled_ids.end());
    std::sort(m.unlabeled_ids.begin(), m.unlabeled_ids.end());
    return m;
}

std::string SplitManifest::serialize() const {
    std::ostringstream os;
    os << "seed=" << seed << " ratio=" << format_double(ratio) << "\n[labeled]\n";
    for (const auto& id : labeled_ids) os << id << "\n";
    os << "[unlabeled]\n";
    for (const auto& id : unlabeled_ids) os << id << "\n";
    return os.str();
}

SplitManifest SplitManifest::parse(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    SplitManifest m;
    if (!std::getline(is, line)) throw DataError("empty split manifest");
    {
        std::istringstream header(line);
        std::string seed_tok, ratio_tok;
        header >> seed_tok >> ratio_tok;
        if (seed_tok.rfind("seed=", 0) != 0 || ratio_tok.rfind("ratio=", 0) != 0)
            throw DataError("bad manifest header '" + line + "'");
        try {
            m.seed = std::stoull(seed_tok.substr(5));
            m.ratio = std::stod(ratio_tok.substr(6));
        } catch (const std::exception&) {
            throw DataError("bad manifest header '" + line + "'");
        }
    }
    std::vector<std::string>* section = nullptr;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line == "[labeled]") {
            section = &m.labeled_ids;
        } else if (line == "[unlabeled]") {
            section = &m.unlabeled_ids;
        } else if (section == nullptr) {
            throw DataError("manifest id '" + line + "' appears before any section");
        } else {
            section->push_back(line);
        }
    }
    return m;
}

void write_manifest(const fs::path& path, const SplitManifest& manifest) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write manifest " + path.string());
    os << manifest.serialize();
}

SplitManifest read_manifest(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read manifest " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return SplitManifest::parse(ss.str());
}

std::vector<Sample> generate_synthetic_glands(const SyntheticSpec& spec) {
    if (spec.size < 32)
        throw ConfigError("synthetic image size must be >= 32, got " + std::to_string(spec.size));
    if (spec.n_images < 0 || spec.n_blobs.first < 0 || spec.n_blobs.second < spec.n_blobs.first)
        throw ConfigError("invalid synthetic blob/image counts");
    if (spec.blob_scale.first <= 0 || spec.blob_scale.second < spec.blob_scale.first)
        throw ConfigError("invalid synthetic blob scale range");

    constexpr double kPi = std::numbers::pi;
    const int size = spec.size;
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(spec.n_images));
    for (int i = 0; i < spec.n_images; ++i) {
        Rng rng = derive_rng(spec.seed, static_cast<std::uint64_t>(i));
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::normal_distribution<double> noise(0.0, 1.0);
        auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

        struct Blob {
            double cy, cx, a, b, cos_t, sin_t;
        };
        const int n_blobs = std::uniform_int_distribution<int>(spec.n_blobs.first,
                                                               spec.n_blobs.second)(rng);
        std::vector<Blob> blobs;
        for (int k = 0; k < n_blobs; ++k) {
            const double theta = uniform(0.0, kPi);
            blobs.push_back({uniform(0.15, 0.85) * size, uniform(0.15, 0.85) * size,
                             uniform(spec.blob_scale.first, spec.blob_scale.second),
                             uniform(spec.blob_scale.first, spec.blob_scale.second),
                             std::cos(theta), std::sin(theta)});
        }

        const double tint = uniform(-0.04, 0.04);
        const double bg_freq = uniform(0.03, 0.08), bg_phase = uniform(0.0, 2 * kPi);
        const double bg_dir = uniform(0.0, kPi);
        const double fg_freq = uniform(0.25, 0.4), fg_phase = uniform(0.0, 2 * kPi);
        const double bg_color[3] = {0.92, 0.78, 0.86};
        const double fg_color[3] = {0.55, 0.32, 0.64};
        const double rim_color[3] = {0.36, 0.17, 0.48};

        Sample s;
        char id_buf[32];
        std::snprintf(id_buf, sizeof id_buf, "_%04d", i);
        s.id = spec.id_prefix + id_buf;
        s.image = Tensor<float>(1, 3, size, size);
        s.mask = LabelMap(1, size, size, 0);
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const double py = y + 0.5, px = x + 0.5;
                double radius = 2.0;  // normalized elliptical radius of the closest blob
                for (const auto& bl : blobs) {
                    const double dy = py - bl.cy, dx = px - bl.cx;
                    const double u = (dx * bl.cos_t + dy * bl.sin_t) / bl.a;
                    const double v = (-dx * bl.sin_t + dy * bl.cos_t) / bl.b;
                    radius = std::min(radius, std::sqrt(u * u + v * v));
                }
                const bool inside = radius <= 1.0;
                (*s.mask)(0, y, x) = inside ? 1 : 0;
                const double wave =
                    std::sin(bg_freq * (px * std::cos(bg_dir) + py * std::sin(bg_dir)) * 2 * kPi + bg_phase);
                const double dots = std::sin(fg_freq * px * 2 * kPi + fg_phase) *
                                    std::sin(fg_freq * py * 2 * kPi - fg_phase);
                for (int c = 0; c < 3; ++c) {
                    double v;
                    if (inside) {
                        const double rim = std::clamp((radius - 0.75) / 0.25, 0.0, 1.0);
                        v = (1 - rim) * fg_color[c] + rim * rim_color[c] + 0.05 * dots;
                    } else {
                        v = bg_color[c] + 0.04 * wave;
                    }
                    v += tint + spec.noise_sigma * noise(rng);
                    s.image(0, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

Tensor<float> stack_images(const std::vector<const Sample*>& samples) {
    if (samples.empty()) return {};
    const Shape4 s0 = samples.front()->image.shape();
    Tensor<float> out(static_cast<Index>(samples.size()), 3, s0.h, s0.w);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& img = samples[i]->image;
        if (img.h() != s0.h || img.w() != s0.w)
            throw DataError("cannot batch images of different sizes ('" + samples[i]->id + "')");
        out.sample(static_cast<Index>(i)) = img.sample(0);
    }
    return out;
}

LabelMap stack_masks(const std::vector<const Sample*>& samples) {
    if (samples.empty()) return {};
    const auto& m0 = samples.front()->mask;
    if (!m0) throw DataError("sample '" + samples.front()->id + "' has no mask");
    LabelMap out(static_cast<Index>(samples.size()), m0->h, m0->w);
    const auto plane = static_cast<std::size_t>(m0->h * m0->w);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& m = samples[i]->mask;
        if (!m) throw DataError("sample '" + samples[i]->id + "' has no mask");
        if (m->h != m0->h || m->w != m0->w)
            throw DataError("cannot batch masks of different sizes ('" + samples[i]->id + "')");
        std::copy(m->data.begin(), m->data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * plane));
    }
    return out;
}

void standardize(Tensor<float>& images, const std::vector<double>& mean,
                 const std::vector<double>& std) {
    if (mean.size() != 3 || std.size() != 3)
        throw ConfigError("normalization mean/std must have 3 entries");
    for (Index b = 0; b < images.n(); ++b)
        for (Index c = 0; c < 3; ++c)
            images.sample(b).row(c) =
                (images.sample(b).row(c).array() - static_cast<float>(mean[static_cast<std::size_t>(c)])) /
                static_cast<float>(std[static_cast<std::size_t>(c)]);
}

}  // namespace semalign
