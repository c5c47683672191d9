#include "nats/tasks.hpp"

#include <algorithm>
#include <fstream>

namespace nats {

int TaskSpec::seq_len() const {
    switch (kind) {
        case TaskKind::Copy: return 2 * copy_prefix_len + 2;
        case TaskKind::Passkey: return passkey_ctx_len + passkey_key_len;
        case TaskKind::CharLM: return charlm_len;
    }
    return 0;
}

int TaskSpec::min_vocab() const {
    switch (kind) {
        case TaskKind::Copy: return kTokFillerBase + 2;
        case TaskKind::Passkey: return kTokFillerBase + 2;
        case TaskKind::CharLM: return 256;
    }
    return 2;
}

TaskKind task_kind_from_string(const std::string &s) {
    if (s == "copy") return TaskKind::Copy;
    if (s == "passkey") return TaskKind::Passkey;
    if (s == "charlm") return TaskKind::CharLM;
    throw std::invalid_argument("unknown task: " + s);
}

std::string task_kind_to_string(TaskKind k) {
    switch (k) {
        case TaskKind::Copy: return "copy";
        case TaskKind::Passkey: return "passkey";
        case TaskKind::CharLM: return "charlm";
    }
    return "?";
}

TaskSampler::TaskSampler(const TaskSpec &spec, int vocab_size)
    : spec_(spec), vocab_size_(vocab_size) {
    require(vocab_size >= spec.min_vocab(), "task: vocab_size too small for task " +
                                                task_kind_to_string(spec.kind));
    if (spec.kind == TaskKind::Copy) require(spec.copy_prefix_len >= 1, "task: bad prefix length");
    if (spec.kind == TaskKind::Passkey) {
        require(spec.passkey_key_len >= 1, "task: bad key length");
        // Body must fit the key block (marker + digits) plus one filler slot.
        require(spec.passkey_ctx_len >= spec.passkey_key_len + 4,
                "task: passkey context too short");
    }
    if (spec.kind == TaskKind::CharLM) {
        std::ifstream f(spec.charlm_path, std::ios::binary);
        if (!f) throw std::runtime_error("charlm: cannot open corpus " + spec.charlm_path);
        corpus_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
        require(corpus_.size() > static_cast<size_t>(spec.charlm_len) + 1,
                "charlm: corpus shorter than the context length");
    }
}

TaskInstance TaskSampler::sample(uint64_t seed) const {
    Rng rng(Rng::mix(seed, 0x7A5C, static_cast<uint64_t>(spec_.kind)));
    TaskInstance ti;
    const int L = spec_.seq_len();
    ti.tokens.resize(L);
    ti.targets.assign(L, 0);
    ti.loss_mask.assign(L, 0);

    switch (spec_.kind) {
        case TaskKind::Copy: {
            const int P = spec_.copy_prefix_len;
            ti.tokens[0] = kTokBos;
            for (int i = 0; i < P; ++i)
                ti.tokens[1 + i] = kTokFillerBase +
                                   static_cast<int32_t>(rng.next_below(vocab_size_ - kTokFillerBase));
            ti.tokens[P + 1] = kTokQuery;
            for (int i = 0; i < P; ++i) ti.tokens[P + 2 + i] = ti.tokens[1 + i];
            // Loss on predicting the second copy, query position included.
            for (int t = P + 1; t < L - 1; ++t) ti.loss_mask[t] = 1;
            break;
        }
        case TaskKind::Passkey: {
            const int K = spec_.passkey_key_len;
            const int body = spec_.passkey_ctx_len - 2;  // between BOS and QUERY
            ti.answer.resize(K);
            for (int i = 0; i < K; ++i)
                ti.answer[i] = kTokDigit0 + static_cast<int32_t>(rng.next_below(10));
            const int block = K + 1;  // KEY_MARK + digits
            const int key_at = 1 + static_cast<int>(rng.next_below(body - block + 1));

            ti.tokens[0] = kTokBos;
            for (int t = 1; t <= body; ++t)
                ti.tokens[t] = kTokFillerBase +
                               static_cast<int32_t>(rng.next_below(vocab_size_ - kTokFillerBase));
            ti.tokens[key_at] = kTokKeyMark;
            for (int i = 0; i < K; ++i) ti.tokens[key_at + 1 + i] = ti.answer[i];
            ti.key_mark_pos = key_at;
            ti.query_pos = body + 1;
            ti.tokens[ti.query_pos] = kTokQuery;
            for (int i = 0; i < K; ++i) ti.tokens[ti.query_pos + 1 + i] = ti.answer[i];
            // Loss on the recalled digits only.
            for (int t = ti.query_pos; t < L - 1; ++t) ti.loss_mask[t] = 1;
            break;
        }
        case TaskKind::CharLM: {
            const size_t span = corpus_.size() - L - 1;
            const size_t off = static_cast<size_t>(rng.next_below(span + 1));
            for (int t = 0; t < L; ++t) ti.tokens[t] = corpus_[off + t];
            for (int t = 0; t < L - 1; ++t) ti.loss_mask[t] = 1;
            ti.targets[L - 1] = corpus_[off + L];
            ti.loss_mask[L - 1] = 1;
            break;
        }
    }

    for (int t = 0; t < L - 1; ++t) ti.targets[t] = ti.tokens[t + 1];
    return ti;
}

Batch TaskSampler::make_batch(int batch, uint64_t seed) const {
    Batch b;
    b.batch = batch;
    b.len = seq_len();
    b.tokens.reserve(static_cast<size_t>(batch) * b.len);
    b.targets.reserve(b.tokens.capacity());
    b.loss_mask.reserve(b.tokens.capacity());
    for (int i = 0; i < batch; ++i) {
        const TaskInstance ti = sample(Rng::mix(seed, static_cast<uint64_t>(i)));
        b.tokens.insert(b.tokens.end(), ti.tokens.begin(), ti.tokens.end());
        b.targets.insert(b.targets.end(), ti.targets.begin(), ti.targets.end());
        b.loss_mask.insert(b.loss_mask.end(), ti.loss_mask.begin(), ti.loss_mask.end());
    }
    return b;
}

std::vector<int32_t> decode_passkey(const std::vector<int32_t> &tokens, int key_len) {
    const auto it = std::find(tokens.begin(), tokens.end(), kTokKeyMark);
    require(it != tokens.end(), "decode_passkey: no key marker in context");
    require(tokens.end() - it > key_len, "decode_passkey: truncated key");
    return std::vector<int32_t>(it + 1, it + 1 + key_len);
}

}  // namespace nats
