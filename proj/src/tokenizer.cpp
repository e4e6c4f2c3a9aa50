#include "lofi/tokenizer.hpp"

#include <sstream>
#include <stdexcept>

#include "lofi/synthgen.hpp"

namespace lofi {

namespace {

const char* kSpecials[] = {"<bos>", "<eos>", "<pad>", "<sep>"};
const char* kBoxChars = "0123456789[],;";

std::vector<std::string> split_ws(const std::string& text) {
    std::istringstream ss(text);
    std::vector<std::string> out;
    std::string w;
    while (ss >> w) out.push_back(w);
    return out;
}

}  // namespace

Tokenizer Tokenizer::build(const PromptSet& prompts) {
    Tokenizer t;
    auto add = [&t](const std::string& s) {
        if (!t.ids.count(s)) {
            t.ids[s] = static_cast<int>(t.vocab.size());
            t.vocab.push_back(s);
        }
    };
    for (const char* s : kSpecials) add(s);
    for (const auto& w : synth::grammar_words()) add(w);
    for (const std::string* p : {&prompts.caption, &prompts.ground, &prompts.dense})
        for (const auto& w : split_ws(*p)) add(w);
    for (const char* c = kBoxChars; *c; ++c) add(std::string(1, *c));
    return t;
}

bool Tokenizer::is_boxchar(int id) const {
    if (id < 0 || id >= size()) return false;
    const std::string& s = vocab[static_cast<size_t>(id)];
    return s.size() == 1 && std::string(kBoxChars).find(s[0]) != std::string::npos;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    if (text.empty()) throw std::invalid_argument("Tokenizer::encode: empty text");
    std::vector<int> out;
    for (const auto& chunk : split_ws(text)) {
        auto it = ids.find(chunk);
        if (it != ids.end()) {
            out.push_back(it->second);
            continue;
        }
        for (char c : chunk) {
            auto ci = ids.find(std::string(1, c));
            if (ci == ids.end())
                throw std::invalid_argument("Tokenizer::encode: unknown token '" + chunk + "'");
            out.push_back(ci->second);
        }
    }
    if (out.empty()) throw std::invalid_argument("Tokenizer::encode: empty text");
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& tokens) const {
    std::string out;
    bool prev_boxchar = false;
    for (int id : tokens) {
        if (id < 0 || id >= size()) throw std::invalid_argument("Tokenizer::decode: bad id");
        bool bc = is_boxchar(id);
        if (!out.empty() && !(prev_boxchar && bc)) out += ' ';
        out += vocab[static_cast<size_t>(id)];
        prev_boxchar = bc;
    }
    return out;
}

}  // namespace lofi
