#include "trojanscope/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

#include <zlib.h>

namespace trojanscope {

LabeledDataset LabeledDataset::subset(std::span<const int> indices) const
{
    LabeledDataset out;
    out.num_classes = num_classes;
    out.images = batch(indices);
    out.labels.reserve(indices.size());
    for (int i : indices)
        out.labels.push_back(labels.at(i));
    return out;
}

Tensor LabeledDataset::batch(std::span<const int> indices) const
{
    std::vector<int> shape = images.shape();
    shape[0] = static_cast<int>(indices.size());
    Tensor out(shape);
    const std::size_t stride = images.size() / images.dim(0);
    for (std::size_t k = 0; k < indices.size(); ++k) {
        auto src = images.row(indices[k]);
        std::copy(src.begin(), src.end(), out.data() + k * stride);
    }
    return out;
}

namespace {

class GzReader {
public:
    explicit GzReader(const std::filesystem::path& path) : file_(gzopen(path.c_str(), "rb")), path_(path)
    {
        if (file_ == nullptr)
            throw std::runtime_error("cannot open IDX file " + path.string());
    }
    ~GzReader() { gzclose(file_); }
    GzReader(const GzReader&) = delete;
    GzReader& operator=(const GzReader&) = delete;

    void read(void* dst, std::size_t n)
    {
        const int got = gzread(file_, dst, static_cast<unsigned>(n));
        if (got < 0 || static_cast<std::size_t>(got) != n)
            throw std::runtime_error("IDX file " + path_.string() + " is truncated");
    }
    std::uint32_t u32()
    {
        unsigned char b[4];
        read(b, 4);
        return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | b[3];
    }

private:
    gzFile file_;
    std::filesystem::path path_;
};

void put_be32(std::ofstream& f, std::uint32_t v)
{
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

LabeledDataset read_idx(const std::filesystem::path& images, const std::filesystem::path& labels, int num_classes)
{
    GzReader img(images);
    const std::uint32_t magic = img.u32();
    if ((magic >> 8) != 0x08 || ((magic & 0xff) != 3 && (magic & 0xff) != 4))
        throw std::runtime_error(images.string() + " is not an unsigned-byte IDX image file");
    const int dims = static_cast<int>(magic & 0xff);
    const int n = static_cast<int>(img.u32());
    const int h = static_cast<int>(img.u32());
    const int w = static_cast<int>(img.u32());
    const int c = dims == 4 ? static_cast<int>(img.u32()) : 1;
    std::vector<unsigned char> raw(static_cast<std::size_t>(n) * h * w * c);
    img.read(raw.data(), raw.size());

    GzReader lab(labels);
    if (lab.u32() != 0x00000801)
        throw std::runtime_error(labels.string() + " is not an unsigned-byte IDX label file");
    const int ln = static_cast<int>(lab.u32());
    if (ln != n)
        throw std::runtime_error("IDX image/label counts differ: " + std::to_string(n) + " vs " + std::to_string(ln));
    std::vector<unsigned char> lraw(static_cast<std::size_t>(n));
    lab.read(lraw.data(), lraw.size());

    LabeledDataset d;
    d.num_classes = num_classes;
    d.images = Tensor({n, h, w, c});
    for (std::size_t i = 0; i < raw.size(); ++i)
        d.images[i] = static_cast<float>(raw[i]) / 255.0f;
    d.labels.assign(lraw.begin(), lraw.end());
    for (int l : d.labels)
        if (l >= num_classes)
            throw std::runtime_error("IDX label " + std::to_string(l) + " exceeds class count");
    return d;
}

void write_idx(const LabeledDataset& data, const std::filesystem::path& images, const std::filesystem::path& labels)
{
    const int n = data.size();
    const auto shape = data.image_shape();
    {
        std::ofstream f(images, std::ios::binary);
        if (!f)
            throw std::runtime_error("cannot write " + images.string());
        const bool color = shape[2] != 1;
        put_be32(f, color ? 0x00000804 : 0x00000803);
        put_be32(f, n);
        put_be32(f, shape[0]);
        put_be32(f, shape[1]);
        if (color)
            put_be32(f, shape[2]);
        std::vector<unsigned char> raw(data.images.size());
        for (std::size_t i = 0; i < raw.size(); ++i)
            raw[i] = static_cast<unsigned char>(std::lround(std::clamp(data.images[i], 0.0f, 1.0f) * 255.0f));
        f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    }
    std::ofstream f(labels, std::ios::binary);
    if (!f)
        throw std::runtime_error("cannot write " + labels.string());
    put_be32(f, 0x00000801);
    put_be32(f, n);
    for (int l : data.labels) {
        const char b = static_cast<char>(l);
        f.write(&b, 1);
    }
}

namespace {

struct Point {
    double x;
    double y;
};
using Stroke = std::vector<Point>;

Stroke arc(double cx, double cy, double rx, double ry, double from_deg, double to_deg, int steps = 10)
{
    Stroke s;
    for (int i = 0; i <= steps; ++i) {
        const double t = (from_deg + (to_deg - from_deg) * i / steps) * std::numbers::pi / 180.0;
        s.push_back({cx + rx * std::cos(t), cy + ry * std::sin(t)});
    }
    return s;
}

// Pen strokes per class in a unit box (x right, y down). Angles run clockwise
// on screen because y points down.
const std::vector<std::vector<Stroke>>& class_templates()
{
    static const std::vector<std::vector<Stroke>> templates = {
        {arc(0.5, 0.5, 0.3, 0.45, 0, 360, 16)},
        {{{0.35, 0.2}, {0.55, 0.05}, {0.55, 0.95}}, {{0.35, 0.95}, {0.75, 0.95}}},
        {arc(0.5, 0.3, 0.3, 0.25, 180, 380, 10), {{0.78, 0.38}, {0.2, 0.95}, {0.85, 0.95}}},
        {arc(0.48, 0.28, 0.3, 0.23, 200, 450, 10), arc(0.48, 0.72, 0.33, 0.25, 270, 520, 10)},
        {{{0.6, 0.05}, {0.15, 0.65}, {0.85, 0.65}}, {{0.65, 0.35}, {0.65, 0.97}}},
        {{{0.8, 0.05}, {0.25, 0.05}, {0.2, 0.45}}, arc(0.48, 0.68, 0.32, 0.28, 230, 500, 10)},
        {{{0.7, 0.05}, {0.3, 0.45}}, arc(0.5, 0.7, 0.28, 0.27, 0, 360, 14)},
        {{{0.15, 0.05}, {0.85, 0.05}, {0.4, 0.95}}, {{0.35, 0.5}, {0.75, 0.5}}},
        {arc(0.5, 0.27, 0.25, 0.22, 0, 360, 12), arc(0.5, 0.72, 0.3, 0.25, 0, 360, 14)},
        {arc(0.48, 0.3, 0.28, 0.25, 0, 360, 14), {{0.76, 0.3}, {0.62, 0.95}}},
    };
    return templates;
}

double segment_distance(Point p, Point a, Point b)
{
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
    return std::sqrt(ex * ex + ey * ey);
}

}  // namespace

LabeledDataset synthetic_digits(const SyntheticDigitsConfig& config)
{
    if (config.count <= 0 || config.height < 8 || config.width < 8)
        throw std::invalid_argument("synthetic_digits: count must be positive and images at least 8x8");
    const auto& templates = class_templates();
    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto range = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

    LabeledDataset d;
    d.num_classes = 10;
    d.images = Tensor({config.count, config.height, config.width, 1});
    d.labels.resize(config.count);

    const double box = 0.68 * std::min(config.height, config.width);  // glyph box, MNIST-style margin
    for (int n = 0; n < config.count; ++n) {
        const int label = n % 10;
        d.labels[n] = label;
        const double angle = range(-0.25, 0.25);
        const double scale_x = box * range(0.7, 1.05);
        const double scale_y = box * range(0.8, 1.05);
        const double shear = range(-0.3, 0.3);
        const double cx = config.width / 2.0 + range(-2.0, 2.0);
        const double cy = config.height / 2.0 + range(-2.0, 2.0);
        const double thickness = range(0.7, 1.8);
        const double ink = range(0.7, 1.0);
        const double jitter = 0.06;

        std::vector<std::pair<Point, Point>> segments;
        for (const Stroke& s : templates[label]) {
            Stroke moved;
            for (Point p : s) {
                const double jx = p.x + range(-jitter, jitter) - 0.5;
                const double jy = p.y + range(-jitter, jitter) - 0.5;
                const double sx = (jx + shear * jy) * scale_x;
                const double sy = jy * scale_y;
                moved.push_back({cx + sx * std::cos(angle) - sy * std::sin(angle),
                                 cy + sx * std::sin(angle) + sy * std::cos(angle)});
            }
            for (std::size_t i = 1; i < moved.size(); ++i)
                segments.emplace_back(moved[i - 1], moved[i]);
        }
        // Short stray marks anywhere in the frame, like pen slips and scanner dirt.
        const int strays = u(rng) >= config.stray_rate ? 0 : (u(rng) < 0.6 ? 1 : 2);
        for (int k = 0; k < strays; ++k) {
            const Point a{range(0, config.width), range(0, config.height)};
            const double len = range(1.0, 4.0), dir = range(0, 2 * std::numbers::pi);
            segments.emplace_back(a, Point{a.x + len * std::cos(dir), a.y + len * std::sin(dir)});
        }

        auto img = d.image(n);
        for (int y = 0; y < config.height; ++y)
            for (int x = 0; x < config.width; ++x) {
                const Point p{x + 0.5, y + 0.5};
                double dist = 1e9;
                for (const auto& [a, b] : segments)
                    dist = std::min(dist, segment_distance(p, a, b));
                const double v = ink * std::clamp(thickness - dist + 0.5, 0.0, 1.0);
                img[y * config.width + x] = static_cast<float>(std::round(v * 255.0) / 255.0);
            }
    }
    // Interleaved labels keep every prefix balanced; shuffle for training order.
    std::vector<int> order(config.count);
    for (int i = 0; i < config.count; ++i)
        order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    return d.subset(order);
}

LabeledDataset sample_subset(const LabeledDataset& data, int count, std::uint64_t seed)
{
    if (count > data.size())
        throw std::invalid_argument("sample_subset: requested " + std::to_string(count) + " of " +
                                    std::to_string(data.size()) + " images");
    std::vector<int> idx(data.size());
    for (int i = 0; i < data.size(); ++i)
        idx[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return data.subset(idx);
}

}  // namespace trojanscope
