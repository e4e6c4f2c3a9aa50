#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace lofi {

// Prompts used for the three autoregressive objectives. Config values, not
// constants: the tokenizer vocabulary is built from whatever is set here.
struct PromptSet {
    std::string caption = "report this scan .";
    std::string ground = "detect all instances of :";
    std::string dense = "describe the regions :";
};

// Closed-vocabulary word/character tokenizer: grammar words and prompt words
// tokenize as whole words, box strings tokenize character-wise.
struct Tokenizer {
    std::vector<std::string> vocab;  // id -> surface form
    std::unordered_map<std::string, int> ids;
    int bos = 0, eos = 1, pad = 2, sep = 3;

    static Tokenizer build(const PromptSet& prompts);

    int size() const { return static_cast<int>(vocab.size()); }

    // Throws std::invalid_argument on text outside the vocabulary or empty text.
    std::vector<int> encode(const std::string& text) const;

    // Inverse of encode on in-vocabulary text: words joined by single spaces,
    // consecutive box characters concatenated.
    std::string decode(const std::vector<int>& tokens) const;

    bool is_boxchar(int id) const;
    bool is_special(int id) const { return id < 4; }
};

}  // namespace lofi
