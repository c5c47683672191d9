#include "nats/metrics.hpp"

#include <stdexcept>

#include "json.hpp"

namespace nats {

std::string MetricRecord::to_json() const {
    nlohmann::json j;
    j["step"] = step;
    j["loss"] = loss;
    j["perplexity"] = perplexity;
    j["kv_fraction"] = kv_fraction;
    j["role_fractions"] = nlohmann::json::array();
    for (const auto &f : role_fractions)
        j["role_fractions"].push_back({f[0], f[1], f[2]});
    j["wall_ms"] = wall_ms;
    return j.dump();
}

JsonlWriter::JsonlWriter(const std::string &path) : out_(path) {
    if (!out_) throw std::runtime_error("cannot open metrics file: " + path);
}

void JsonlWriter::write(const MetricRecord &rec) { write_line(rec.to_json()); }

void JsonlWriter::write_line(const std::string &json) {
    out_ << json << "\n";
    out_.flush();
}

void write_csv(const std::string &path, const std::vector<std::string> &header,
               const std::vector<std::vector<std::string>> &rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open csv file: " + path);
    for (size_t i = 0; i < header.size(); ++i) f << (i ? "," : "") << header[i];
    f << "\n";
    for (const auto &row : rows) {
        for (size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << row[i];
        f << "\n";
    }
}

}  // namespace nats
