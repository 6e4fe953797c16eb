#include "criticgate/checkpoint.hpp"

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace criticgate {

namespace {

using nlohmann::json;

std::vector<std::pair<std::string, Matrix*>> tensor_index(CriticModel& m) {
    std::vector<std::pair<std::string, Matrix*>> out;
    out.emplace_back("tok_emb", &m.tok_emb);
    out.emplace_back("pos_emb", &m.pos_emb);
    for (size_t l = 0; l < m.layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerWeights& lw = m.layers[l];
        out.emplace_back(p + "ln1_g", &lw.ln1_g);
        out.emplace_back(p + "ln1_b", &lw.ln1_b);
        out.emplace_back(p + "wq", &lw.wq);
        out.emplace_back(p + "wk", &lw.wk);
        out.emplace_back(p + "wv", &lw.wv);
        out.emplace_back(p + "wo", &lw.wo);
        out.emplace_back(p + "ln2_g", &lw.ln2_g);
        out.emplace_back(p + "ln2_b", &lw.ln2_b);
        out.emplace_back(p + "w1", &lw.w1);
        out.emplace_back(p + "w2", &lw.w2);
        AttnLora& al = m.adapters[l];
        out.emplace_back(p + "lora.q.B", &al.q.B);
        out.emplace_back(p + "lora.q.A", &al.q.A);
        out.emplace_back(p + "lora.k.B", &al.k.B);
        out.emplace_back(p + "lora.k.A", &al.k.A);
        out.emplace_back(p + "lora.v.B", &al.v.B);
        out.emplace_back(p + "lora.v.A", &al.v.A);
        out.emplace_back(p + "lora.o.B", &al.o.B);
        out.emplace_back(p + "lora.o.A", &al.o.A);
    }
    out.emplace_back("lnf_g", &m.lnf_g);
    out.emplace_back("lnf_b", &m.lnf_b);
    out.emplace_back("unemb", &m.unemb);
    return out;
}

json config_to_json(const ModelConfig& c) {
    return json{{"n_layers", c.n_layers},   {"d_model", c.d_model},
                {"n_heads", c.n_heads},     {"d_ff", c.d_ff},
                {"max_ctx", c.max_ctx},     {"vocab_size", c.vocab_size},
                {"lora_rank", c.lora_rank}, {"lora_alpha", c.lora_alpha},
                {"init_seed", c.init_seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_ctx = j.at("max_ctx").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.lora_rank = j.at("lora_rank").get<int>();
    c.lora_alpha = j.at("lora_alpha").get<double>();
    c.init_seed = j.at("init_seed").get<uint64_t>();
    return c;
}

}  // namespace

void save_checkpoint(const CriticModel& model, const std::string& path) {
    auto& m = const_cast<CriticModel&>(model);
    auto tensors = tensor_index(m);

    std::vector<char> blob;
    json index = json::array();
    for (auto& [name, mat] : tensors) {
        const size_t offset = blob.size();
        std::vector<float> f32(mat->data.size());
        for (size_t i = 0; i < f32.size(); ++i) f32[i] = static_cast<float>(mat->data[i]);
        const size_t nbytes = f32.size() * sizeof(float);
        blob.resize(offset + nbytes);
        std::memcpy(blob.data() + offset, f32.data(), nbytes);
        const uint32_t crc = static_cast<uint32_t>(
            crc32(0L, reinterpret_cast<const Bytef*>(blob.data() + offset),
                  static_cast<uInt>(nbytes)));
        index.push_back(json{{"name", name},
                             {"rows", mat->rows},
                             {"cols", mat->cols},
                             {"offset", offset},
                             {"nbytes", nbytes},
                             {"crc32", crc}});
    }

    json manifest{{"format_version", kCheckpointFormatVersion},
                  {"dtype", "float32_le"},
                  {"config", config_to_json(model.cfg)},
                  {"specials",
                   {{"PAD", Tokenizer::kPad},
                    {"SEP", Tokenizer::kSep},
                    {"T_PASS", Tokenizer::kPass},
                    {"T_FAIL", Tokenizer::kFail}}},
                  {"tensors", index}};

    std::ofstream jf(path + ".json", std::ios::trunc);
    if (!jf) throw CheckpointError("cannot write manifest: " + path + ".json");
    jf << manifest.dump(2) << "\n";
    jf.close();

    std::ofstream bf(path + ".bin", std::ios::binary | std::ios::trunc);
    if (!bf) throw CheckpointError("cannot write tensor blob: " + path + ".bin");
    bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

CriticModel load_checkpoint(const std::string& path) {
    std::ifstream jf(path + ".json");
    if (!jf) throw CheckpointError("cannot open manifest: " + path + ".json");
    json manifest;
    try {
        jf >> manifest;
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed manifest: ") + e.what());
    }

    const int version = manifest.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
        throw CheckpointVersionError("checkpoint format_version " + std::to_string(version) +
                                     " unsupported (expected " +
                                     std::to_string(kCheckpointFormatVersion) + ")");

    const ModelConfig cfg = config_from_json(manifest.at("config"));
    cfg.validate();

    std::ifstream bf(path + ".bin", std::ios::binary);
    if (!bf) throw CheckpointError("cannot open tensor blob: " + path + ".bin");
    std::vector<char> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

    // Allocate an empty model with the right shapes, then fill from the blob.
    CriticModel m = build_model(cfg);
    auto tensors = tensor_index(m);
    const json& index = manifest.at("tensors");
    if (index.size() != tensors.size())
        throw CheckpointError("manifest tensor count mismatch");

    for (size_t i = 0; i < tensors.size(); ++i) {
        const json& e = index[i];
        auto& [name, mat] = tensors[i];
        if (e.at("name").get<std::string>() != name)
            throw CheckpointError("unexpected tensor name: " + e.at("name").get<std::string>());
        const int rows = e.at("rows").get<int>();
        const int cols = e.at("cols").get<int>();
        if (rows != mat->rows || cols != mat->cols)
            throw CheckpointError("tensor shape mismatch for " + name);
        const size_t offset = e.at("offset").get<size_t>();
        const size_t nbytes = e.at("nbytes").get<size_t>();
        if (offset + nbytes > blob.size())
            throw CheckpointTruncatedError("tensor blob truncated at " + name);
        const uint32_t crc = static_cast<uint32_t>(
            crc32(0L, reinterpret_cast<const Bytef*>(blob.data() + offset),
                  static_cast<uInt>(nbytes)));
        if (crc != e.at("crc32").get<uint32_t>())
            throw CheckpointChecksumError("crc mismatch for tensor " + name);
        std::vector<float> f32(nbytes / sizeof(float));
        std::memcpy(f32.data(), blob.data() + offset, nbytes);
        if (f32.size() != mat->data.size())
            throw CheckpointError("tensor size mismatch for " + name);
        for (size_t k = 0; k < f32.size(); ++k) mat->data[k] = static_cast<double>(f32[k]);
    }
    return m;
}

}  // namespace criticgate
