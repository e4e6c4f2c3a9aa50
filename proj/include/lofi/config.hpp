#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "lofi/model.hpp"
#include "lofi/synthgen.hpp"
#include "lofi/trainer.hpp"

namespace lofi {

// Flat "dotted.key = value" config with file loading and overrides. The
// resolved state is echoed verbatim into every output artifact.
struct KvConfig {
    std::map<std::string, std::string> values;

    static KvConfig from_file(const std::string& path);
    void set(const std::string& key, const std::string& value) { values[key] = value; }
    void apply_override(const std::string& assignment);  // "key=value"

    bool has(const std::string& key) const { return values.count(key) != 0; }
    std::string get(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    double get_double(const std::string& key, double fallback) const;
    uint64_t get_u64(const std::string& key, uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    std::string echo() const;  // canonical "key = value" lines
};

ModelConfig model_config_from_kv(const KvConfig& kv);
synth::GenConfig gen_config_from_kv(const KvConfig& kv);
TrainConfig train_config_from_kv(const KvConfig& kv);
PromptSet prompts_from_kv(const KvConfig& kv);

// write resolved values (defaults included) back into the kv map so the
// config echo reflects the full effective configuration
void resolve_into_kv(KvConfig& kv, const ModelConfig& c);
void resolve_into_kv(KvConfig& kv, const synth::GenConfig& g);
void resolve_into_kv(KvConfig& kv, const TrainConfig& t);

// {command_line, config, seed, version} echo block for output artifacts
std::string make_run_echo(const std::string& command_line, const KvConfig& kv, uint64_t seed);

extern const char* kVersionTag;

}  // namespace lofi
