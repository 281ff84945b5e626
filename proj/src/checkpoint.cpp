// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "idea/errors.hpp"

namespace idea {
namespace {

constexpr std::array<char, 8> kMagic{'I', 'D', 'E', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_le(std::ostream& out, T v) {
    unsigned char b[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    unsigned char b[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw IOError("checkpoint: truncated header");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return static_cast<T>(v);
}

void write_float(std::ostream& out, float f) { write_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f)); }
float read_float(std::istream& in) { return std::bit_cast<float>(read_le<std::uint32_t>(in)); }

nlohmann::json read_header(std::istream& in, const std::string& path) {
    std::array<char, 8> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw IOError("not a checkpoint file: " + path);
    const auto version = read_le<std::uint32_t>(in);
    if (version != kVersion) throw IOError("unsupported checkpoint version " + std::to_string(version));
    const auto length = read_le<std::uint64_t>(in);
    std::string text(length, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw IOError("checkpoint: truncated manifest");
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IOError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const IdeaModel& model, const nlohmann::json& extra) {
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, p] : model.parameters().items()) {
        tensors.push_back({{"name", name}, {"shape", {p.value.rows(), p.value.cols()}}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(p.value.size()) * 4;
    }
    nlohmann::json prefixes;
    for (Modality m : kModalities) prefixes[std::string(to_string(m))] = modal_prefix(m, model.config().subject);
    const nlohmann::json manifest{{"format", "idea-checkpoint"},
                                  {"model", model.config()},
                                  {"variant", to_string(model.variant())},
                                  {"prefixes", prefixes},
                                  {"vocab_size", default_tokenizer().vocab_size()},
                                  {"tensors", tensors},
                                  {"extra", extra}};
    const std::string text = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IOError("cannot write checkpoint: " + path);
    out.write(kMagic.data(), kMagic.size());
    write_le<std::uint32_t>(out, kVersion);
    write_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, p] : model.parameters().items())
        for (Eigen::Index r = 0; r < p.value.rows(); ++r)
            for (Eigen::Index c = 0; c < p.value.cols(); ++c) write_float(out, static_cast<float>(p.value(r, c)));
    if (!out) throw IOError("error while writing checkpoint: " + path);
}

nlohmann::json read_checkpoint_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open checkpoint: " + path);
    return read_header(in, path);
}

IdeaModel load_checkpoint(const std::string& path, nlohmann::json* extra) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open checkpoint: " + path);
    const nlohmann::json manifest = read_header(in, path);
    IdeaModel model(manifest.at("model").get<ModelConfig>(), variant_from_string(manifest.at("variant").get<std::string>()), 0);
    ParameterStore& store = model.parameters();
    for (const auto& t : manifest.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const Eigen::Index rows = t.at("shape").at(0).get<Eigen::Index>();
        const Eigen::Index cols = t.at("shape").at(1).get<Eigen::Index>();
        Eigen::MatrixXd value(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) value(r, c) = read_float(in);
        if (!in) throw IOError("checkpoint: truncated payload at " + name);
        if (store.contains(name)) {
            Parameter& p = store.at(name);
            if (p.value.rows() != rows || p.value.cols() != cols) throw ShapeMismatch("checkpoint: shape of " + name + " differs");
            p.value = std::move(value);
        } else {
            store.add(name, std::move(value));
        }
    }
    if (model.config().freeze_text) model.set_trainable("text.", false);
    if (extra) *extra = manifest.value("extra", nlohmann::json::object());
    return model;
}

}  // namespace idea
