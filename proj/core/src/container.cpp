#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>

#include <zlib.h>

#include "miniprune/dataio.hpp"
#include "miniprune/error.hpp"

namespace miniprune {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

constexpr const char* kReservedKeys[] = {"format_version", "data_file", "data_bytes", "checksum", "tensors"};

std::uint32_t crc32_of(const std::string& bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
        crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + pos), chunk);
        pos += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

void append_le(std::string& out, const Tensor& t) {
    const std::size_t start = out.size();
    out.resize(start + static_cast<std::size_t>(t.numel()) * 4);
    char* dst = out.data() + start;
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(dst, t.data(), static_cast<std::size_t>(t.numel()) * 4);
    } else {
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const auto u = std::bit_cast<std::uint32_t>(t[i]);
            for (int b = 0; b < 4; ++b) dst[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xff);
        }
    }
}

Tensor read_le(const std::string& bytes, std::size_t offset, const Shape& shape) {
    Tensor t(shape);
    const char* src = bytes.data() + offset;
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(t.data(), src, static_cast<std::size_t>(t.numel()) * 4);
    } else {
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            std::uint32_t u = 0;
            for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[i * 4 + b])) << (8 * b);
            t[i] = std::bit_cast<float>(u);
        }
    }
    return t;
}

std::string read_bytes(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw LoadError("cannot open '" + file.string() + "'");
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_bytes_atomic(const fs::path& file, const std::string& bytes) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    fs::path tmp = file;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("cannot write '" + tmp.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw InputError("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, file);
}

json parse_json_file(const fs::path& file) {
    const std::string text = read_bytes(file);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw LoadError("malformed JSON in '" + file.string() + "': " + e.what());
    }
}

std::string hex32(std::uint32_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(8, '0');
    for (int i = 7; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

}  // namespace

void write_text_atomic(const fs::path& file, const std::string& text) { write_bytes_atomic(file, text); }

std::string read_text(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw InputError("cannot open '" + file.string() + "'");
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_container(const fs::path& dir, const std::string& stem, const json& meta,
                     const std::map<std::string, Tensor>& tensors, const std::vector<std::string>& order) {
    if (!meta.is_object()) throw ConfigError("container meta must be a JSON object");
    for (const char* k : kReservedKeys)
        if (meta.contains(k)) throw ConfigError(std::string("container meta may not use reserved key '") + k + "'");
    if (order.size() != tensors.size()) throw ConsistencyError("container order does not list every tensor");

    std::string data;
    json records = json::array();
    for (const auto& name : order) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ConsistencyError("container order names unknown tensor '" + name + "'");
        const Tensor& t = it->second;
        const std::size_t offset = data.size();
        append_le(data, t);
        records.push_back({{"name", name},
                           {"dtype", "f32"},
                           {"shape", t.shape()},
                           {"offset", offset},
                           {"length", data.size() - offset}});
    }

    json manifest = meta;
    manifest["format_version"] = kFormatVersion;
    manifest["data_file"] = stem + ".bin";
    manifest["data_bytes"] = data.size();
    manifest["checksum"] = {{"algorithm", "crc32"}, {"value", hex32(crc32_of(data))}};
    manifest["tensors"] = std::move(records);

    fs::create_directories(dir);
    write_bytes_atomic(dir / (stem + ".bin"), data);
    write_bytes_atomic(dir / (stem + ".json"), manifest.dump(2) + "\n");
}

ContainerContents read_container(const fs::path& manifest_path) {
    const json manifest = parse_json_file(manifest_path);
    const std::string where = manifest_path.string();
    try {
        if (!manifest.is_object()) throw LoadError(where + ": manifest is not an object");
        if (!manifest.contains("format_version") || manifest["format_version"] != kFormatVersion)
            throw LoadError(where + ": unsupported format_version " +
                            (manifest.contains("format_version") ? manifest["format_version"].dump() : "<missing>"));
        const fs::path data_path = manifest_path.parent_path() / manifest.at("data_file").get<std::string>();
        const std::string data = read_bytes(data_path);
        const auto& sum = manifest.at("checksum");
        if (sum.at("algorithm") != "crc32") throw LoadError(where + ": unknown checksum algorithm");
        if (data.size() != manifest.at("data_bytes").get<std::size_t>())
            throw LoadError(data_path.string() + ": size " + std::to_string(data.size()) + " != recorded " +
                            manifest.at("data_bytes").dump());
        if (hex32(crc32_of(data)) != sum.at("value").get<std::string>())
            throw LoadError(data_path.string() + ": checksum mismatch");

        ContainerContents out;
        std::size_t expect = 0;
        for (const auto& rec : manifest.at("tensors")) {
            const std::string name = rec.at("name").get<std::string>();
            const auto fail = [&](const std::string& msg) { throw LoadError(where + ": record '" + name + "': " + msg); };
            if (rec.at("dtype") != "f32") fail("unsupported dtype " + rec.at("dtype").dump());
            const Shape shape = rec.at("shape").get<Shape>();
            std::int64_t numel = 1;
            for (auto d : shape) {
                if (d <= 0) fail("non-positive dimension");
                numel *= d;
            }
            const auto offset = rec.at("offset").get<std::size_t>();
            const auto length = rec.at("length").get<std::size_t>();
            if (offset != expect) fail("offset " + std::to_string(offset) + " breaks contiguous layout");
            if (length != static_cast<std::size_t>(numel) * 4) fail("length disagrees with shape");
            if (offset + length > data.size()) fail("extends past end of data file");
            if (out.tensors.contains(name)) fail("duplicate record");
            out.tensors.emplace(name, read_le(data, offset, shape));
            out.order.push_back(name);
            expect = offset + length;
        }
        if (expect != data.size()) throw LoadError(where + ": records do not cover the data file");
        out.meta = manifest;
        for (const char* k : kReservedKeys) out.meta.erase(k);
        return out;
    } catch (const json::exception& e) {
        throw LoadError(where + ": malformed manifest: " + e.what());
    }
}

json config_to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size},
            {"d_model", c.d_model},
            {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},
            {"d_ff", c.d_ff},
            {"ffn_kind", to_string(c.ffn_kind)},
            {"max_seq_len", c.max_seq_len},
            {"tie_embeddings", c.tie_embeddings},
            {"layer_heads", c.layer_heads},
            {"layer_d_ff", c.layer_d_ff}};
}

ModelConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    ModelConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "vocab_size") c.vocab_size = value.get<int>();
            else if (key == "d_model") c.d_model = value.get<int>();
            else if (key == "n_layers") c.n_layers = value.get<int>();
            else if (key == "n_heads") c.n_heads = value.get<int>();
            else if (key == "d_ff") c.d_ff = value.get<int>();
            else if (key == "ffn_kind") c.ffn_kind = ffn_kind_from_string(value.get<std::string>());
            else if (key == "max_seq_len") c.max_seq_len = value.get<int>();
            else if (key == "tie_embeddings") c.tie_embeddings = value.get<bool>();
            else if (key == "layer_heads") c.layer_heads = value.get<std::vector<int>>();
            else if (key == "layer_d_ff") c.layer_d_ff = value.get<std::vector<int>>();
            else throw ConfigError("unknown model config key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad model config value: ") + e.what());
    }
    c.validate();
    return c;
}

void save_checkpoint(const ModelCheckpoint& ckpt, const fs::path& dir) {
    validate_checkpoint(ckpt);
    std::vector<std::string> order;
    for (const auto& spec : expected_tensors(ckpt.config)) order.push_back(spec.name);
    write_container(dir, "model", {{"kind", "checkpoint"}, {"config", config_to_json(ckpt.config)}}, ckpt.tensors,
                    order);
}

ModelCheckpoint load_checkpoint(const fs::path& path) {
    const fs::path manifest = fs::is_directory(path) ? path / "model.json" : path;
    ContainerContents contents = read_container(manifest);
    if (contents.meta.value("kind", "") != "checkpoint")
        throw LoadError(manifest.string() + ": not a checkpoint manifest");
    ModelCheckpoint ckpt;
    try {
        ckpt.config = config_from_json(contents.meta.at("config"));
    } catch (const Error& e) {
        throw LoadError(manifest.string() + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(manifest.string() + ": " + e.what());
    }
    const auto expected = expected_tensors(ckpt.config);
    for (const auto& spec : expected) {
        auto it = contents.tensors.find(spec.name);
        if (it == contents.tensors.end()) throw LoadError(manifest.string() + ": missing record '" + spec.name + "'");
        if (it->second.shape() != spec.shape)
            throw LoadError(manifest.string() + ": record '" + spec.name + "' has shape " +
                            shape_to_string(it->second.shape()) + ", config implies " + shape_to_string(spec.shape));
    }
    if (contents.tensors.size() != expected.size()) {
        for (const auto& [name, t] : contents.tensors) {
            bool known = false;
            for (const auto& spec : expected) known = known || spec.name == name;
            if (!known) throw LoadError(manifest.string() + ": unexpected record '" + name + "'");
        }
    }
    ckpt.tensors = std::move(contents.tensors);
    return ckpt;
}

json plan_to_json(const PrunePlan& plan) {
    json layers = json::array();
    for (const auto& [key, e] : plan.layers) {
        layers.push_back({{"layer", key.first},
                          {"kind", to_string(key.second)},
                          {"total", e.total},
                          {"retained", e.retained},
                          {"pruned", plan.pruned(key.first, key.second)},
                          {"scores", e.scores}});
    }
    json meta = json::object();
    for (const auto& [k, v] : plan.meta) meta[k] = v;
    return {{"format_version", kFormatVersion},
            {"ratio", plan.ratio},
            {"scope", plan.scope},
            {"protected_layers", plan.protected_layers},
            {"meta", meta},
            {"layers", layers}};
}

PrunePlan plan_from_json(const json& j) {
    PrunePlan plan;
    try {
        if (j.at("format_version") != kFormatVersion)
            throw LoadError("unsupported plan format_version " + j.at("format_version").dump());
        plan.ratio = j.at("ratio").get<double>();
        if (!(plan.ratio >= 0.0 && plan.ratio < 1.0)) throw LoadError("plan ratio must lie in [0, 1)");
        plan.scope = j.at("scope").get<std::string>();
        plan.protected_layers = j.at("protected_layers").get<std::set<int>>();
        for (const auto& [k, v] : j.at("meta").items()) plan.meta[k] = v.get<std::string>();
        for (const auto& rec : j.at("layers")) {
            PrunePlan::Entry e;
            e.total = rec.at("total").get<int>();
            e.retained = rec.at("retained").get<std::vector<int>>();
            e.scores = rec.at("scores").get<std::vector<double>>();
            const bool ascending =
                std::adjacent_find(e.retained.begin(), e.retained.end(), std::greater_equal<>()) == e.retained.end();
            if (!ascending || e.retained.empty() || static_cast<int>(e.scores.size()) != e.total ||
                e.retained.front() < 0 || e.retained.back() >= e.total)
                throw LoadError("plan entry for layer " + rec.at("layer").dump() + " has invalid retained indices");
            plan.layers[{rec.at("layer").get<int>(), group_kind_from_string(rec.at("kind").get<std::string>())}] =
                std::move(e);
        }
    } catch (const json::exception& e) {
        throw LoadError(std::string("malformed plan: ") + e.what());
    }
    return plan;
}

void save_plan(const PrunePlan& plan, const fs::path& file) { write_text_atomic(file, plan_to_json(plan).dump(2) + "\n"); }

PrunePlan load_plan(const fs::path& file) {
    try {
        return plan_from_json(parse_json_file(file));
    } catch (const LoadError& e) {
        throw LoadError(file.string() + ": " + e.what());
    }
}

void save_scores(const SensitivityMap& map, const fs::path& dir) {
    std::vector<std::string> order;
    for (const auto& [name, t] : map.scores) order.push_back(name);
    write_container(dir, "scores",
                    {{"kind", "scores"}, {"criterion", to_string(map.criterion)}, {"provenance", map.provenance}},
                    map.scores, order);
}

SensitivityMap load_scores(const fs::path& path) {
    const fs::path manifest = fs::is_directory(path) ? path / "scores.json" : path;
    ContainerContents contents = read_container(manifest);
    if (contents.meta.value("kind", "") != "scores") throw LoadError(manifest.string() + ": not a score dump");
    SensitivityMap map;
    map.criterion = criterion_from_string(contents.meta.at("criterion").get<std::string>());
    map.provenance = contents.meta.value("provenance", "");
    map.scores = std::move(contents.tensors);
    return map;
}

}  // namespace miniprune
