#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace nats {

struct MetricRecord {
    int64_t step = 0;
    double loss = 0.0;
    double perplexity = 0.0;  // exp(mean cross-entropy)
    std::vector<double> kv_fraction;                    // per layer
    std::vector<std::array<double, 3>> role_fractions;  // per layer (G, L, SW)
    double wall_ms = 0.0;

    std::string to_json() const;
};

// Append-only JSON-lines metric stream.
class JsonlWriter {
  public:
    explicit JsonlWriter(const std::string &path);
    void write(const MetricRecord &rec);
    void write_line(const std::string &json);

  private:
    std::ofstream out_;
};

void write_csv(const std::string &path, const std::vector<std::string> &header,
               const std::vector<std::vector<std::string>> &rows);

}  // namespace nats
