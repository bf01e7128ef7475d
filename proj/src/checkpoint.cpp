#include "semalign/checkpoint.hpp"

#include "semalign/errors.hpp"
#include "semalign/random.hpp"

#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace semalign {

namespace fs = std::filesystem;

namespace {

bool is_frozen(const Parameter<float>& p) {
    return p.group == ParamGroup::encoder || p.group == ParamGroup::text_encoder;
}

std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string encode_le(const MatrixX<float>& m) {
    std::string bytes(static_cast<std::size_t>(m.size()) * 4, '\0');
    for (Index i = 0; i < m.size(); ++i) {
        std::uint32_t u;
        std::memcpy(&u, m.data() + i, 4);
        for (int k = 0; k < 4; ++k) bytes[static_cast<std::size_t>(4 * i + k)] = static_cast<char>((u >> (8 * k)) & 0xFF);
    }
    return bytes;
}

MatrixX<float> decode_le(const std::string& bytes, Index rows, Index cols) {
    MatrixX<float> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
        std::uint32_t u = 0;
        for (int k = 0; k < 4; ++k)
            u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[static_cast<std::size_t>(4 * i + k)])) << (8 * k);
        std::memcpy(m.data() + i, &u, 4);
    }
    return m;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot read " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("checkpoint: write failed for " + p.string());
}

std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

}  // namespace

std::string frozen_weights_hash(SegmentationModel<float>& model) {
    std::uint64_t h = fnv1a("");
    for (const auto* p : model.parameters()) {
        if (!is_frozen(*p)) continue;
        h = fnv1a(p->name, h);
        h = fnv1a(encode_le(p->value), h);
    }
    return hex64(h);
}

void save_checkpoint(const fs::path& dir, const TrainConfig& cfg, SegmentationModel<float>& model,
                     const Sgd<float>* optimizer, const ThresholdState& threshold, long step) {
    fs::create_directories(dir / "tensors");
    std::ostringstream m;
    m << "semalign-checkpoint\n";
    m << "version " << kCheckpointVersion << "\n";
    m << "step " << step << "\n";
    m << "tau " << format_double(threshold.tau) << "\n";
    m << "config " << to_json(cfg).dump() << "\n";
    m << "frozen_hash " << frozen_weights_hash(model) << "\n";

    auto emit = [&](const char* kind, std::size_t index, const std::string& name, const MatrixX<float>& value) {
        if (name.find_first_of(" \t\n") != std::string::npos)
            throw ConfigError("checkpoint: tensor name '" + name + "' contains whitespace");
        char file[64];
        std::snprintf(file, sizeof file, "tensors/%c%04zu.bin", kind[0], index);
        const std::string bytes = encode_le(value);
        write_file(dir / file, bytes);
        m << "tensor " << kind << ' ' << index << ' ' << name << " f32 " << value.rows() << ' ' << value.cols()
          << ' ' << file << ' ' << hex64(fnv1a(bytes)) << "\n";
    };
    std::size_t i = 0;
    for (const auto* p : model.parameters())
        if (!is_frozen(*p)) emit("param", i++, p->name, p->value);
    if (optimizer) {
        const auto& params = optimizer->params();
        for (std::size_t k = 0; k < params.size(); ++k)
            emit("momentum", k, params[k]->name, optimizer->momentum_buffers()[k]);
    }
    std::string text = m.str();
    text += "manifest_hash " + hex64(fnv1a(text)) + "\n";
    write_file(dir / "manifest.txt", text);
}

CheckpointState read_checkpoint(const fs::path& dir) {
    const std::string text = read_file(dir / "manifest.txt");
    const auto pos = text.rfind("manifest_hash ");
    if (pos == std::string::npos) throw DataError("checkpoint: manifest has no manifest_hash line");
    std::string stored = text.substr(pos + 14);
    while (!stored.empty() && (stored.back() == '\n' || stored.back() == '\r')) stored.pop_back();
    if (stored != hex64(fnv1a(std::string_view(text).substr(0, pos))))
        throw DataError("checkpoint: manifest hash mismatch (manifest was modified)");

    CheckpointState st;
    std::istringstream in(text.substr(0, pos));
    std::string line;
    std::getline(in, line);
    if (line != "semalign-checkpoint") throw DataError("checkpoint: not a checkpoint manifest");
    bool have_config = false;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "version") {
            int v = 0;
            ls >> v;
            if (v != kCheckpointVersion)
                throw DataError("checkpoint: version " + std::to_string(v) + " is not supported (expected " +
                                std::to_string(kCheckpointVersion) + ")");
        } else if (key == "step") {
            ls >> st.step;
        } else if (key == "tau") {
            std::string v;
            ls >> v;
            std::from_chars(v.data(), v.data() + v.size(), st.tau);
        } else if (key == "config") {
            st.config = config_from_json(nlohmann::json::parse(line.substr(7)));
            have_config = true;
        } else if (key == "frozen_hash") {
            ls >> st.frozen_hash;
        } else if (key == "tensor") {
            std::string kind, name, dtype, file, hash;
            std::size_t index = 0;
            Index rows = 0, cols = 0;
            ls >> kind >> index >> name >> dtype >> rows >> cols >> file >> hash;
            if (!ls || dtype != "f32") throw DataError("checkpoint: malformed tensor line: " + line);
            const std::string bytes = read_file(dir / file);
            if (static_cast<Index>(bytes.size()) != rows * cols * 4)
                throw DataError("checkpoint: blob " + file + " has the wrong size");
            if (hex64(fnv1a(bytes)) != hash) throw DataError("checkpoint: blob " + file + " hash mismatch");
            if (kind != "param" && kind != "momentum") throw DataError("checkpoint: unknown tensor kind " + kind);
            auto& dst = kind == "param" ? st.tensors : st.momentum;
            if (index != dst.size()) throw DataError("checkpoint: tensor index out of order: " + line);
            dst.push_back({name, decode_le(bytes, rows, cols)});
        } else if (!key.empty()) {
            throw DataError("checkpoint: unknown manifest entry '" + key + "'");
        }
    }
    if (!have_config) throw DataError("checkpoint: manifest has no config");
    return st;
}

void restore_model(const CheckpointState& st, SegmentationModel<float>& model) {
    if (!st.frozen_hash.empty() && st.frozen_hash != frozen_weights_hash(model))
        throw DataError("checkpoint: frozen encoder weights differ from the ones the checkpoint was trained with");
    std::size_t i = 0;
    for (auto* p : model.parameters()) {
        if (is_frozen(*p)) continue;
        if (i >= st.tensors.size()) throw DataError("checkpoint: missing tensor for '" + p->name + "'");
        const auto& t = st.tensors[i++];
        if (t.name != p->name || t.value.rows() != p->value.rows() || t.value.cols() != p->value.cols())
            throw DataError("checkpoint: tensor '" + t.name + "' does not match model tensor '" + p->name + "'");
        p->value = t.value;
    }
    if (i != st.tensors.size()) throw DataError("checkpoint: has more tensors than the model");
    if (model.has_text()) model.refresh_text();
}

void restore_optimizer(const CheckpointState& st, Sgd<float>& opt) {
    const auto& params = opt.params();
    if (st.momentum.size() != params.size())
        throw DataError("checkpoint: optimizer state has " + std::to_string(st.momentum.size()) +
                        " buffers, expected " + std::to_string(params.size()));
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& t = st.momentum[k];
        if (t.name != params[k]->name || t.value.rows() != params[k]->value.rows() ||
            t.value.cols() != params[k]->value.cols())
            throw DataError("checkpoint: momentum buffer '" + t.name + "' does not match '" + params[k]->name + "'");
        opt.momentum_buffers()[k] = t.value;
    }
}

}  // namespace semalign
