#pragma once

#include <string>
#include <vector>

#include "nats/model.hpp"

namespace nats {

// Special token ids shared by the synthetic tasks.
inline constexpr int32_t kTokBos = 0;
inline constexpr int32_t kTokQuery = 1;
inline constexpr int32_t kTokKeyMark = 2;
inline constexpr int32_t kTokDigit0 = 3;   // ten digit tokens 3..12
inline constexpr int32_t kTokFillerBase = 13;

enum class TaskKind { Copy, Passkey, CharLM };

struct TaskSpec {
    TaskKind kind = TaskKind::Copy;
    int copy_prefix_len = 23;
    int passkey_ctx_len = 48;
    int passkey_key_len = 4;
    std::string charlm_path;
    int charlm_len = 128;

    int seq_len() const;
    int min_vocab() const;
};

TaskKind task_kind_from_string(const std::string &s);
std::string task_kind_to_string(TaskKind k);

struct TaskInstance {
    std::vector<int32_t> tokens;
    std::vector<int32_t> targets;
    std::vector<uint8_t> loss_mask;
    // Passkey extras: the embedded answer and where it sits in the context.
    std::vector<int32_t> answer;
    int key_mark_pos = -1;
    int query_pos = -1;
};

// Deterministic (seed -> instance) generator; charlm loads its corpus once.
class TaskSampler {
  public:
    TaskSampler(const TaskSpec &spec, int vocab_size);

    TaskInstance sample(uint64_t seed) const;
    Batch make_batch(int batch, uint64_t seed) const;
    int seq_len() const { return spec_.seq_len(); }
    const TaskSpec &spec() const { return spec_; }

  private:
    TaskSpec spec_;
    int vocab_size_;
    std::vector<uint8_t> corpus_;  // charlm bytes
};

// Reads the key embedded in a passkey context back out (generator round-trip).
std::vector<int32_t> decode_passkey(const std::vector<int32_t> &tokens, int key_len);

}  // namespace nats
