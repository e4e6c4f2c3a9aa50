#include "lofi/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace lofi {

const char* kVersionTag = "lofi-0.1.0";

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

KvConfig KvConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    KvConfig kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: missing '=' at " + path + ":" +
                                        std::to_string(lineno));
        kv.values[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return kv;
}

void KvConfig::apply_override(const std::string& assignment) {
    size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw std::invalid_argument("override must be key=value: " + assignment);
    values[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

std::string KvConfig::get(const std::string& key, const std::string& fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second;
}

int KvConfig::get_int(const std::string& key, int fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
        return std::stoi(it->second);
    } catch (...) {
        throw std::invalid_argument("config: bad integer for " + key + ": " + it->second);
    }
}

double KvConfig::get_double(const std::string& key, double fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (...) {
        throw std::invalid_argument("config: bad number for " + key + ": " + it->second);
    }
}

uint64_t KvConfig::get_u64(const std::string& key, uint64_t fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
        return std::stoull(it->second);
    } catch (...) {
        throw std::invalid_argument("config: bad integer for " + key + ": " + it->second);
    }
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw std::invalid_argument("config: bad boolean for " + key + ": " + it->second);
}

std::string KvConfig::echo() const {
    std::ostringstream out;
    for (const auto& [k, v] : values) out << k << " = " << v << "\n";
    return out.str();
}

ModelConfig model_config_from_kv(const KvConfig& kv) {
    ModelConfig c;
    c.image_w = kv.get_int("model.image_w", c.image_w);
    c.image_h = kv.get_int("model.image_h", c.image_h);
    c.patch = kv.get_int("model.patch", c.patch);
    c.d = kv.get_int("model.d", c.d);
    c.enc_blocks = kv.get_int("model.enc_blocks", c.enc_blocks);
    c.enc_heads = kv.get_int("model.enc_heads", c.enc_heads);
    c.enc_dff = kv.get_int("model.enc_dff", c.enc_dff);
    c.txt_max_len = kv.get_int("model.txt_max_len", c.txt_max_len);
    c.d_dec = kv.get_int("model.d_dec", c.d_dec);
    c.dec_blocks = kv.get_int("model.dec_blocks", c.dec_blocks);
    c.dec_heads = kv.get_int("model.dec_heads", c.dec_heads);
    c.dec_dff = kv.get_int("model.dec_dff", c.dec_dff);
    c.pooled_tokens = kv.get_int("model.pooled_tokens", c.pooled_tokens);
    c.context_cap = kv.get_int("model.context_cap", c.context_cap);
    c.attn_window = kv.get_int("model.attn_window", c.attn_window);
    c.alibi_max_exp = kv.get_double("model.alibi_max_exp", c.alibi_max_exp);
    c.logit_scale_init = kv.get_double("model.logit_scale_init", c.logit_scale_init);
    c.logit_bias_init = kv.get_double("model.logit_bias_init", c.logit_bias_init);
    c.literal_sigmoid = kv.get_bool("model.literal_sigmoid", c.literal_sigmoid);
    c.img_pos_init_std = kv.get_double("model.img_pos_init_std", c.img_pos_init_std);
    c.logit_mult = kv.get_double("model.logit_mult", c.logit_mult);
    c.attn_score_mult = kv.get_double("model.attn_score_mult", c.attn_score_mult);
    if (c.image_w % c.patch != 0 || c.image_h % c.patch != 0)
        throw std::invalid_argument("config: image size must be divisible by patch");
    return c;
}

synth::GenConfig gen_config_from_kv(const KvConfig& kv) {
    synth::GenConfig g;
    g.image_w = kv.get_int("gen.image_w", g.image_w);
    g.image_h = kv.get_int("gen.image_h", g.image_h);
    g.min_objects = kv.get_int("gen.min_objects", g.min_objects);
    g.max_objects = kv.get_int("gen.max_objects", g.max_objects);
    g.max_pair_iou = kv.get_double("gen.max_pair_iou", g.max_pair_iou);
    g.max_attempts = kv.get_int("gen.max_attempts", g.max_attempts);
    g.p_nobox = kv.get_double("gen.p_nobox", g.p_nobox);
    if (g.min_objects < 1 || g.max_objects < g.min_objects)
        throw std::invalid_argument("config: bad object count range");
    if (g.p_nobox < 0 || g.p_nobox > 1)
        throw std::invalid_argument("config: gen.p_nobox must be in [0,1]");
    return g;
}

PromptSet prompts_from_kv(const KvConfig& kv) {
    PromptSet p;
    p.caption = kv.get("prompt.caption", p.caption);
    p.ground = kv.get("prompt.ground", p.ground);
    p.dense = kv.get("prompt.dense", p.dense);
    return p;
}

TrainConfig train_config_from_kv(const KvConfig& kv) {
    TrainConfig t;
    t.epochs = kv.get_int("train.epochs", t.epochs);
    t.batch_size = kv.get_int("train.batch_size", t.batch_size);
    t.lr0 = kv.get_double("train.lr0", t.lr0);
    t.lambda = kv.get_double("train.lambda", t.lambda);
    t.seed = kv.get_u64("train.seed", t.seed);
    t.loss_variant = variant_from_string(kv.get("train.loss_variant", "full"));
    std::string strat = kv.get("train.tau_strategy", "sampled");
    if (strat == "sampled")
        t.tau_strategy = TauStrategy::sampled;
    else if (strat == "summed")
        t.tau_strategy = TauStrategy::summed;
    else
        throw std::invalid_argument("config: bad train.tau_strategy " + strat);
    t.adam_beta1 = kv.get_double("train.adam_beta1", t.adam_beta1);
    t.adam_beta2 = kv.get_double("train.adam_beta2", t.adam_beta2);
    t.adam_eps = kv.get_double("train.adam_eps", t.adam_eps);
    t.grad_clip = kv.get_double("train.grad_clip", t.grad_clip);
    t.sent_min = kv.get_int("train.sent_min", t.sent_min);
    t.sent_max = kv.get_int("train.sent_max", t.sent_max);
    t.max_steps = kv.get_int("train.max_steps", t.max_steps);
    t.model = model_config_from_kv(kv);
    t.prompts = prompts_from_kv(kv);
    if (kv.get_bool("train.lora", false)) {
        LoraSpec spec;
        spec.encoder_rank = kv.get_int("lora.encoder_rank", spec.encoder_rank);
        spec.decoder_rank = kv.get_int("lora.decoder_rank", spec.decoder_rank);
        spec.scaling = kv.get_double("lora.scaling", spec.scaling);
        t.lora = spec;
    }
    return t;
}

namespace {

std::string fmt_double(double v) {
    std::ostringstream ss;
    ss << v;
    return ss.str();
}

}  // namespace

void resolve_into_kv(KvConfig& kv, const ModelConfig& c) {
    kv.set("model.image_w", std::to_string(c.image_w));
    kv.set("model.image_h", std::to_string(c.image_h));
    kv.set("model.patch", std::to_string(c.patch));
    kv.set("model.d", std::to_string(c.d));
    kv.set("model.enc_blocks", std::to_string(c.enc_blocks));
    kv.set("model.enc_heads", std::to_string(c.enc_heads));
    kv.set("model.enc_dff", std::to_string(c.enc_dff));
    kv.set("model.txt_max_len", std::to_string(c.txt_max_len));
    kv.set("model.d_dec", std::to_string(c.d_dec));
    kv.set("model.dec_blocks", std::to_string(c.dec_blocks));
    kv.set("model.dec_heads", std::to_string(c.dec_heads));
    kv.set("model.dec_dff", std::to_string(c.dec_dff));
    kv.set("model.pooled_tokens", std::to_string(c.pooled_tokens));
    kv.set("model.context_cap", std::to_string(c.context_cap));
    kv.set("model.attn_window", std::to_string(c.attn_window));
    kv.set("model.alibi_max_exp", fmt_double(c.alibi_max_exp));
    kv.set("model.logit_scale_init", fmt_double(c.logit_scale_init));
    kv.set("model.logit_bias_init", fmt_double(c.logit_bias_init));
    kv.set("model.literal_sigmoid", c.literal_sigmoid ? "true" : "false");
    kv.set("model.img_pos_init_std", fmt_double(c.img_pos_init_std));
    kv.set("model.logit_mult", fmt_double(c.logit_mult));
    kv.set("model.attn_score_mult", fmt_double(c.attn_score_mult));
}

void resolve_into_kv(KvConfig& kv, const synth::GenConfig& g) {
    kv.set("gen.image_w", std::to_string(g.image_w));
    kv.set("gen.image_h", std::to_string(g.image_h));
    kv.set("gen.min_objects", std::to_string(g.min_objects));
    kv.set("gen.max_objects", std::to_string(g.max_objects));
    kv.set("gen.max_pair_iou", fmt_double(g.max_pair_iou));
    kv.set("gen.max_attempts", std::to_string(g.max_attempts));
    kv.set("gen.p_nobox", fmt_double(g.p_nobox));
}

void resolve_into_kv(KvConfig& kv, const TrainConfig& t) {
    kv.set("train.epochs", std::to_string(t.epochs));
    kv.set("train.batch_size", std::to_string(t.batch_size));
    kv.set("train.lr0", fmt_double(t.lr0));
    kv.set("train.lambda", fmt_double(t.lambda));
    kv.set("train.seed", std::to_string(t.seed));
    kv.set("train.loss_variant", variant_to_string(t.loss_variant));
    kv.set("train.tau_strategy", t.tau_strategy == TauStrategy::sampled ? "sampled" : "summed");
    kv.set("train.adam_beta1", fmt_double(t.adam_beta1));
    kv.set("train.adam_beta2", fmt_double(t.adam_beta2));
    kv.set("train.adam_eps", fmt_double(t.adam_eps));
    kv.set("train.grad_clip", fmt_double(t.grad_clip));
    kv.set("train.sent_min", std::to_string(t.sent_min));
    kv.set("train.sent_max", std::to_string(t.sent_max));
    kv.set("train.max_steps", std::to_string(t.max_steps));
    kv.set("train.lora", t.lora ? "true" : "false");
    kv.set("prompt.caption", t.prompts.caption);
    kv.set("prompt.ground", t.prompts.ground);
    kv.set("prompt.dense", t.prompts.dense);
    resolve_into_kv(kv, t.model);
}

std::string make_run_echo(const std::string& command_line, const KvConfig& kv, uint64_t seed) {
    nlohmann::ordered_json j;
    j["command_line"] = command_line;
    j["config"] = kv.values;
    j["seed"] = seed;
    j["version"] = kVersionTag;
    return j.dump(2);
}

}  // namespace lofi
