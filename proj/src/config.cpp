#include "nats/config.hpp"

#include <fstream>
#include <sstream>

namespace nats {

namespace {

std::string trim(const std::string &s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

template <typename T>
std::vector<T> parse_list(const std::string &csv, T (*conv)(const std::string &)) {
    std::vector<T> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(conv(item));
    }
    return out;
}

}  // namespace

std::vector<double> parse_double_list(const std::string &csv) {
    return parse_list<double>(csv, +[](const std::string &s) { return std::stod(s); });
}
std::vector<int> parse_int_list(const std::string &csv) {
    return parse_list<int>(csv, +[](const std::string &s) { return std::stoi(s); });
}
std::vector<uint64_t> parse_u64_list(const std::string &csv) {
    return parse_list<uint64_t>(
        csv, +[](const std::string &s) { return static_cast<uint64_t>(std::stoull(s)); });
}

void ExperimentConfig::set(const std::string &key, const std::string &value) {
    try {
        if (key == "n_layers") model.n_layers = std::stoi(value);
        else if (key == "n_heads") model.n_heads = std::stoi(value);
        else if (key == "d_model") model.d_model = std::stoi(value);
        else if (key == "d_head") model.d_head = std::stoi(value);
        else if (key == "vocab_size") model.vocab_size = std::stoi(value);
        else if (key == "max_seq_len") model.max_seq_len = std::stoi(value);
        else if (key == "window") model.window = std::stoi(value);
        else if (key == "lambda") model.lambda = std::stod(value);
        else if (key == "temperature") model.temperature = std::stod(value);
        else if (key == "tile") model.tile = std::stoi(value);
        else if (key == "pos_encoding") {
            if (value == "rotary") model.pos_encoding = PosEncoding::Rotary;
            else if (value == "sinusoidal") model.pos_encoding = PosEncoding::Sinusoidal;
            else throw std::invalid_argument("pos_encoding must be rotary or sinusoidal");
        } else if (key == "lr") train.lr = std::stod(value);
        else if (key == "beta1") train.beta1 = std::stod(value);
        else if (key == "beta2") train.beta2 = std::stod(value);
        else if (key == "eps") train.eps = std::stod(value);
        else if (key == "weight_decay") train.weight_decay = std::stod(value);
        else if (key == "grad_clip") train.grad_clip = std::stod(value);
        else if (key == "batch_size") train.batch_size = std::stoi(value);
        else if (key == "steps") train.steps = std::stoll(value);
        else if (key == "seed") train.seed = std::stoull(value);
        else if (key == "mode") {
            if (value == "scratch") train.mode = TrainConfig::Mode::Scratch;
            else if (value == "distill") train.mode = TrainConfig::Mode::Distill;
            else throw std::invalid_argument("mode must be scratch or distill");
        } else if (key == "task") task.kind = task_kind_from_string(value);
        else if (key == "copy_prefix_len") task.copy_prefix_len = std::stoi(value);
        else if (key == "passkey_ctx_len") task.passkey_ctx_len = std::stoi(value);
        else if (key == "passkey_key_len") task.passkey_key_len = std::stoi(value);
        else if (key == "charlm_path") task.charlm_path = value;
        else if (key == "charlm_len") task.charlm_len = std::stoi(value);
        else if (key == "log_every") log_every = std::stoll(value);
        else if (key == "eval_batches") eval_batches = std::stoi(value);
        else if (key == "eval_batch_size") eval_batch_size = std::stoi(value);
        else if (key == "sweep_seeds") sweep_seeds = parse_u64_list(value);
        else if (key == "sweep_warmup_steps") sweep_warmup_steps = std::stoll(value);
        else if (key == "sweep_band_lo") sweep_band_lo = std::stod(value);
        else if (key == "sweep_band_hi") sweep_band_hi = std::stod(value);
        else if (key == "streaming_sink") streaming_sink = std::stoi(value);
        else if (key == "streaming_recent") streaming_recent = std::stoi(value);
        else if (key == "h2o_budget") h2o_budget = std::stoi(value);
        else if (key == "h2o_recent") h2o_recent = std::stoi(value);
        else throw std::invalid_argument("unknown config key: " + key);
    } catch (const std::invalid_argument &) {
        throw;
    } catch (const std::exception &) {
        throw std::invalid_argument("bad value for config key " + key + ": " + value);
    }
}

void ExperimentConfig::validate() const {
    model.validate();
    require(train.batch_size >= 1 && train.steps >= 1, "config: batch_size/steps must be >= 1");
    require(train.lr >= 0, "config: lr must be >= 0");
    require(log_every >= 1, "config: log_every must be >= 1");
    require(eval_batches >= 1 && eval_batch_size >= 1, "config: eval sizes must be >= 1");
    require(model.vocab_size >= task.min_vocab(),
            "config: vocab_size too small for task " + task_kind_to_string(task.kind));
    require(task.seq_len() <= model.max_seq_len,
            "config: task sequence length exceeds max_seq_len");
    require(sweep_band_lo <= sweep_band_hi, "config: sweep band is inverted");
}

std::string ExperimentConfig::print() const {
    std::ostringstream os;
    os << "n_layers = " << model.n_layers << "\n";
    os << "n_heads = " << model.n_heads << "\n";
    os << "d_model = " << model.d_model << "\n";
    os << "d_head = " << model.d_head << "\n";
    os << "vocab_size = " << model.vocab_size << "\n";
    os << "max_seq_len = " << model.max_seq_len << "\n";
    os << "window = " << model.window << "\n";
    os << "lambda = " << model.lambda << "\n";
    os << "temperature = " << model.temperature << "\n";
    os << "pos_encoding = "
       << (model.pos_encoding == PosEncoding::Rotary ? "rotary" : "sinusoidal") << "\n";
    os << "tile = " << model.tile << "\n";
    os << "lr = " << train.lr << "\n";
    os << "beta1 = " << train.beta1 << "\n";
    os << "beta2 = " << train.beta2 << "\n";
    os << "eps = " << train.eps << "\n";
    os << "weight_decay = " << train.weight_decay << "\n";
    os << "grad_clip = " << train.grad_clip << "\n";
    os << "batch_size = " << train.batch_size << "\n";
    os << "steps = " << train.steps << "\n";
    os << "seed = " << train.seed << "\n";
    os << "mode = " << (train.mode == TrainConfig::Mode::Scratch ? "scratch" : "distill") << "\n";
    os << "task = " << task_kind_to_string(task.kind) << "\n";
    os << "copy_prefix_len = " << task.copy_prefix_len << "\n";
    os << "passkey_ctx_len = " << task.passkey_ctx_len << "\n";
    os << "passkey_key_len = " << task.passkey_key_len << "\n";
    os << "charlm_path = " << task.charlm_path << "\n";
    os << "charlm_len = " << task.charlm_len << "\n";
    os << "log_every = " << log_every << "\n";
    os << "eval_batches = " << eval_batches << "\n";
    os << "eval_batch_size = " << eval_batch_size << "\n";
    os << "sweep_seeds = ";
    for (size_t i = 0; i < sweep_seeds.size(); ++i) os << (i ? "," : "") << sweep_seeds[i];
    os << "\n";
    os << "sweep_warmup_steps = " << sweep_warmup_steps << "\n";
    os << "sweep_band_lo = " << sweep_band_lo << "\n";
    os << "sweep_band_hi = " << sweep_band_hi << "\n";
    os << "streaming_sink = " << streaming_sink << "\n";
    os << "streaming_recent = " << streaming_recent << "\n";
    os << "h2o_budget = " << h2o_budget << "\n";
    os << "h2o_recent = " << h2o_recent << "\n";
    return os.str();
}

ExperimentConfig ExperimentConfig::from_file(const std::string &path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open config file: " + path);
    ExperimentConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                        ": expected key = value");
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

}  // namespace nats
