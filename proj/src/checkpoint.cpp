#include "nats/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace nats {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'N', 'A', 'T', 'S', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;
}  // namespace

std::string config_to_json(const ModelConfig &c) {
    nlohmann::json j;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["d_model"] = c.d_model;
    j["d_head"] = c.d_head;
    j["vocab_size"] = c.vocab_size;
    j["max_seq_len"] = c.max_seq_len;
    j["window"] = c.window;
    j["lambda"] = c.lambda;
    j["temperature"] = c.temperature;
    j["pos_encoding"] = c.pos_encoding == PosEncoding::Rotary ? "rotary" : "sinusoidal";
    j["tile"] = c.tile;
    return j.dump();
}

ModelConfig config_from_json(const std::string &text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_head = j.at("d_head").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.window = j.at("window").get<int>();
    c.lambda = j.at("lambda").get<double>();
    c.temperature = j.at("temperature").get<double>();
    c.pos_encoding = j.at("pos_encoding").get<std::string>() == "rotary"
                         ? PosEncoding::Rotary
                         : PosEncoding::Sinusoidal;
    c.tile = j.at("tile").get<int>();
    c.validate();
    return c;
}

void save_checkpoint(ModelState &state, const std::string &path, int64_t step, uint64_t seed) {
    std::vector<ParamView> views = param_views(state);
    nlohmann::json header;
    header["config"] = nlohmann::json::parse(config_to_json(state.config));
    header["step"] = step;
    header["seed"] = seed;
    header["arrays"] = nlohmann::json::array();
    uint64_t offset = 0;
    for (const ParamView &p : views) {
        header["arrays"].push_back(
            {{"name", p.name}, {"count", p.data->size()}, {"offset", offset}, {"dtype", "f64"}});
        offset += p.data->size() * sizeof(double);
    }
    const std::string htext = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f.write(kMagic, sizeof(kMagic));
    const uint32_t version = kVersion;
    f.write(reinterpret_cast<const char *>(&version), sizeof(version));
    const uint64_t hlen = htext.size();
    f.write(reinterpret_cast<const char *>(&hlen), sizeof(hlen));
    f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const ParamView &p : views)
        f.write(reinterpret_cast<const char *>(p.data->data()),
                static_cast<std::streamsize>(p.data->size() * sizeof(double)));
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string &path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read checkpoint: " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    uint32_t version = 0;
    f.read(reinterpret_cast<char *>(&version), sizeof(version));
    if (version != kVersion) throw std::runtime_error("unsupported checkpoint version");
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char *>(&hlen), sizeof(hlen));
    std::string htext(hlen, '\0');
    f.read(htext.data(), static_cast<std::streamsize>(hlen));
    const nlohmann::json header = nlohmann::json::parse(htext);

    LoadedCheckpoint out;
    out.step = header.at("step").get<int64_t>();
    out.seed = header.at("seed").get<uint64_t>();
    out.state = init_model(config_from_json(header.at("config").dump()), 0);

    std::vector<ParamView> views = param_views(out.state);
    const auto &arrays = header.at("arrays");
    require(arrays.size() == views.size(), "checkpoint: array count mismatch");
    for (size_t i = 0; i < views.size(); ++i) {
        require(arrays[i].at("name").get<std::string>() == views[i].name,
                "checkpoint: tensor name mismatch at " + views[i].name);
        require(arrays[i].at("count").get<size_t>() == views[i].data->size(),
                "checkpoint: tensor size mismatch at " + views[i].name);
        f.read(reinterpret_cast<char *>(views[i].data->data()),
               static_cast<std::streamsize>(views[i].data->size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("checkpoint truncated: " + path);
    return out;
}

void export_routers(const ModelState &state, const std::string &path) {
    nlohmann::json j;
    j["layers"] = nlohmann::json::array();
    for (size_t i = 0; i < state.layers.size(); ++i) {
        const RouterParams &r = state.layers[i].router;
        j["layers"].push_back(
            {{"layer", i}, {"weight", r.weight}, {"bias", r.bias}});
    }
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write router export: " + path);
    f << j.dump(2) << "\n";
}

void import_routers(ModelState &state, const std::string &path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read router export: " + path);
    const nlohmann::json j = nlohmann::json::parse(f);
    const auto &layers = j.at("layers");
    require(layers.size() == state.layers.size(), "router import: layer count mismatch");
    for (size_t i = 0; i < layers.size(); ++i) {
        RouterParams &r = state.layers[i].router;
        const auto w = layers[i].at("weight").get<std::vector<double>>();
        const auto b = layers[i].at("bias").get<std::vector<double>>();
        require(w.size() == r.weight.size() && b.size() == r.bias.size(),
                "router import: shape mismatch");
        r.weight = w;
        r.bias = b;
    }
}

}  // namespace nats
