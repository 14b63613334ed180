#include "trojanscope/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <zlib.h>

namespace trojanscope {

static_assert(std::endian::native == std::endian::little, "model format writer assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'T', 'S', 'M', 'F'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t offset)
{
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(bytes[offset + i]) << (8 * i);
    return v;
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes)
{
    uLong crc = crc32(0L, Z_NULL, 0);
    return static_cast<std::uint32_t>(crc32(crc, bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace

nlohmann::json layer_to_json(const LayerSpec& l)
{
    nlohmann::json j;
    j["kind"] = to_string(l.kind);
    switch (l.kind) {
        case LayerKind::conv2d:
            j["in_channels"] = l.in;
            j["out_channels"] = l.out;
            j["kernel"] = l.kernel;
            j["stride"] = l.stride;
            j["padding"] = l.padding;
            break;
        case LayerKind::dense:
            j["in_units"] = l.in;
            j["out_units"] = l.out;
            break;
        case LayerKind::maxpool2d:
            j["size"] = l.kernel;
            j["stride"] = l.stride;
            break;
        default: break;
    }
    return j;
}

LayerSpec layer_from_json(const nlohmann::json& j)
{
    const LayerKind kind = parse_layer_kind(j.at("kind").get<std::string>());
    switch (kind) {
        case LayerKind::conv2d:
            return LayerSpec::conv2d(j.at("in_channels"), j.at("out_channels"), j.at("kernel"), j.at("stride"),
                                     j.at("padding"));
        case LayerKind::dense: return LayerSpec::dense(j.at("in_units"), j.at("out_units"));
        case LayerKind::maxpool2d: return LayerSpec::maxpool2d(j.at("size"), j.at("stride"));
        case LayerKind::relu: return LayerSpec::relu();
        case LayerKind::flatten: return LayerSpec::flatten();
    }
    throw ModelFormatError("unreachable layer kind");
}

const ModelGraph& ModelBundle::graph(const std::string& name) const
{
    for (const auto& [n, g] : graphs)
        if (n == name)
            return g;
    throw std::out_of_range("model bundle has no graph named '" + name + "'");
}

std::vector<std::uint8_t> serialize_bundle(const ModelBundle& bundle)
{
    nlohmann::json header;
    header["graphs"] = nlohmann::json::array();
    std::vector<const Tensor*> blocks;
    for (const auto& [name, model] : bundle.graphs) {
        validate(model);
        nlohmann::json g;
        g["name"] = name;
        g["input_shape"] = model.input_shape;
        g["layers"] = nlohmann::json::array();
        g["tensors"] = nlohmann::json::array();
        for (std::size_t i = 0; i < model.layers.size(); ++i) {
            g["layers"].push_back(layer_to_json(model.layers[i]));
            if (!model.layers[i].has_params())
                continue;
            g["tensors"].push_back({{"layer", i}, {"role", "weight"}, {"shape", model.params[i].weight.shape()}});
            g["tensors"].push_back({{"layer", i}, {"role", "bias"}, {"shape", model.params[i].bias.shape()}});
            blocks.push_back(&model.params[i].weight);
            blocks.push_back(&model.params[i].bias);
        }
        header["graphs"].push_back(std::move(g));
    }
    header["metadata"] = bundle.metadata;
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_u32(out, kModelFormatVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    for (const Tensor* t : blocks) {
        const std::size_t at = out.size();
        out.resize(at + t->size() * sizeof(float));
        std::memcpy(out.data() + at, t->data(), t->size() * sizeof(float));
    }
    put_u32(out, crc32_of(out));
    return out;
}

ModelBundle deserialize_bundle(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 12)
        throw TruncatedStreamError("model stream truncated: " + std::to_string(bytes.size()) +
                                   " bytes, shorter than the fixed preamble");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw ModelFormatError("not a model file (bad magic bytes)");
    const std::uint32_t version = get_u32(bytes, 4);
    if (version != kModelFormatVersion)
        throw VersionMismatchError("model format version " + std::to_string(version) + " is not supported (expected " +
                                   std::to_string(kModelFormatVersion) + ")");
    const std::uint32_t header_len = get_u32(bytes, 8);
    if (bytes.size() < 12ull + header_len + 4)
        throw TruncatedStreamError("model stream truncated inside the header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw ModelFormatError(std::string("model header is not valid JSON: ") + e.what());
    }

    ModelBundle bundle;
    std::size_t floats = 0;
    try {
        for (const auto& g : header.at("graphs")) {
            std::vector<LayerSpec> layers;
            for (const auto& l : g.at("layers"))
                layers.push_back(layer_from_json(l));
            ModelGraph m = make_model<float>(g.at("input_shape").get<std::vector<int>>(), layers);
            for (const auto& t : g.at("tensors")) {
                const auto shape = t.at("shape").get<std::vector<int>>();
                const std::size_t layer = t.at("layer");
                const std::string role = t.at("role");
                if (layer >= m.layers.size())
                    throw ModelFormatError("tensor refers to missing layer " + std::to_string(layer));
                const Tensor& expect = role == "weight" ? m.params[layer].weight : m.params[layer].bias;
                if (expect.shape() != shape)
                    throw ModelFormatError("tensor shape " + shape_string(shape) + " does not match layer " +
                                           std::to_string(layer));
                floats += shape_size(shape);
            }
            bundle.graphs.emplace_back(g.at("name").get<std::string>(), std::move(m));
        }
        bundle.metadata = header.value("metadata", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw ModelFormatError(std::string("malformed model header: ") + e.what());
    } catch (const ShapeError& e) {
        throw ModelFormatError(std::string("model header describes an invalid graph: ") + e.what());
    }

    const std::size_t expected = 12ull + header_len + floats * sizeof(float) + 4;
    if (bytes.size() < expected)
        throw TruncatedStreamError("model stream truncated: " + std::to_string(bytes.size()) + " of " +
                                   std::to_string(expected) + " bytes");
    if (bytes.size() > expected)
        throw ModelFormatError("model stream has " + std::to_string(bytes.size() - expected) + " trailing bytes");
    const std::uint32_t stored = get_u32(bytes, expected - 4);
    if (stored != crc32_of(bytes.first(expected - 4)))
        throw ChecksumError("model stream checksum mismatch");

    std::size_t at = 12ull + header_len;
    for (auto& [name, m] : bundle.graphs) {
        for (std::size_t i = 0; i < m.layers.size(); ++i) {
            if (!m.layers[i].has_params())
                continue;
            for (Tensor* t : {&m.params[i].weight, &m.params[i].bias}) {
                std::memcpy(t->data(), bytes.data() + at, t->size() * sizeof(float));
                at += t->size() * sizeof(float);
            }
        }
    }
    return bundle;
}

std::vector<std::uint8_t> serialize(const ModelGraph& model)
{
    ModelBundle b;
    b.graphs.emplace_back("model", model);
    return serialize_bundle(b);
}

ModelGraph deserialize(std::span<const std::uint8_t> bytes)
{
    ModelBundle b = deserialize_bundle(bytes);
    if (b.graphs.size() != 1)
        throw ModelFormatError("expected a single-graph model file, found " + std::to_string(b.graphs.size()) +
                               " graphs");
    return std::move(b.graphs.front().second);
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f)
            throw std::runtime_error("cannot open " + tmp + " for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f)
            throw std::runtime_error("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw std::runtime_error("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void write_text(const std::filesystem::path& path, const std::string& text)
{
    write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::filesystem::path& path)
{
    const auto bytes = read_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

void save_model(const std::filesystem::path& path, const ModelGraph& model) { write_bytes(path, serialize(model)); }

ModelGraph load_model(const std::filesystem::path& path) { return deserialize(read_bytes(path)); }

}  // namespace trojanscope
