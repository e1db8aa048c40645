#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace vcpseg {

// Token ids without SOS/EOS; those are added when the sequence is embedded.
struct TokenSequence {
    std::vector<int> ids;
};

class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    // Throws OverlongPrompt when the text is empty or produces more than
    // max_tokens ids (context length 77 minus SOS and EOS).
    virtual TokenSequence encode(const std::string& text) const = 0;
    virtual std::string decode(const TokenSequence& seq) const = 0;
    virtual int sos_id() const = 0;
    virtual int eos_id() const = 0;
    virtual int vocab_size() const = 0;

    int max_tokens = 75;
};

// Whitespace tokenizer over a declared word list. One id per word; ids 0/1
// are reserved for <sos>/<eos>. Intended for desk-scale runs and tests.
class ToyTokenizer : public Tokenizer {
public:
    explicit ToyTokenizer(const std::vector<std::string>& words);

    TokenSequence encode(const std::string& text) const override;
    std::string decode(const TokenSequence& seq) const override;
    int sos_id() const override { return 0; }
    int eos_id() const override { return 1; }
    int vocab_size() const override { return static_cast<int>(id_to_word_.size()); }

private:
    std::map<std::string, int> word_to_id_;
    std::vector<std::string> id_to_word_;
};

// Byte-pair-encoding tokenizer compatible with the merge tables shipped with
// public dual-encoder checkpoints. Text is lowercased and whitespace-
// normalized before encoding. The ASCII classes of the reference splitter are
// matched exactly; non-ASCII input falls back to byte-level symbols.
class BpeTokenizer : public Tokenizer {
public:
    static std::shared_ptr<BpeTokenizer> from_merges_file(const std::string& path);
    static std::shared_ptr<BpeTokenizer> from_merges(const std::vector<std::string>& merge_lines);

    TokenSequence encode(const std::string& text) const override;
    std::string decode(const TokenSequence& seq) const override;
    int sos_id() const override { return sos_id_; }
    int eos_id() const override { return eos_id_; }
    int vocab_size() const override { return static_cast<int>(vocab_.size()); }

private:
    BpeTokenizer() = default;
    std::vector<std::string> bpe_word(const std::string& chunk) const;

    std::map<std::string, int> vocab_;                    // symbol -> id
    std::vector<std::string> id_to_symbol_;
    std::map<std::pair<std::string, std::string>, int> merge_rank_;
    std::map<unsigned char, std::string> byte_to_sym_;    // byte -> UTF-8 symbol
    std::map<std::string, unsigned char> sym_to_byte_;
    int sos_id_ = 0;
    int eos_id_ = 0;
};

}  // namespace vcpseg
