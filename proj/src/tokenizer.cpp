#include "vcpseg/tokenizer.hpp"

#include "vcpseg/errors.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace vcpseg {

namespace {

std::string lowercase(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::vector<std::string> split_whitespace(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

// UTF-8 encoding of a code point (enough for the byte-remap range < 0x2000).
std::string utf8(unsigned int cp) {
    std::string s;
    if (cp < 0x80) {
        s.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return s;
}

bool is_ascii_letter(char c) { return std::isalpha(static_cast<unsigned char>(c)); }
bool is_ascii_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)); }
bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)); }

// Splits normalized text into the chunks the merge loop runs on:
// contractions, letter runs, single digits, punctuation runs.
std::vector<std::string> regex_chunks(const std::string& text) {
    static const std::vector<std::string> contractions = {"'s", "'t",  "'re", "'ve",
                                                          "'m", "'ll", "'d"};
    std::vector<std::string> chunks;
    std::size_t i = 0;
    while (i < text.size()) {
        if (is_space(text[i])) {
            ++i;
            continue;
        }
        if (text[i] == '\'') {
            bool matched = false;
            for (const auto& c : contractions) {
                if (text.compare(i, c.size(), c) == 0) {
                    chunks.push_back(c);
                    i += c.size();
                    matched = true;
                    break;
                }
            }
            if (matched) continue;
        }
        if (is_ascii_letter(text[i])) {
            std::size_t j = i;
            while (j < text.size() && is_ascii_letter(text[j])) ++j;
            chunks.push_back(text.substr(i, j - i));
            i = j;
            continue;
        }
        if (is_ascii_digit(text[i])) {
            chunks.push_back(text.substr(i, 1));
            ++i;
            continue;
        }
        // punctuation / non-ASCII run
        std::size_t j = i;
        while (j < text.size() && !is_space(text[j]) && !is_ascii_letter(text[j]) &&
               !is_ascii_digit(text[j]))
            ++j;
        chunks.push_back(text.substr(i, j - i));
        i = j;
    }
    return chunks;
}

std::string whitespace_clean(const std::string& s) {
    std::string out;
    bool prev_space = false;
    for (char c : s) {
        if (is_space(c)) {
            prev_space = true;
            continue;
        }
        if (prev_space && !out.empty()) out.push_back(' ');
        prev_space = false;
        out.push_back(c);
    }
    return out;
}

}  // namespace

ToyTokenizer::ToyTokenizer(const std::vector<std::string>& words) {
    id_to_word_ = {"<sos>", "<eos>"};
    std::vector<std::string> uniq;
    for (const auto& w : words) {
        const std::string lw = lowercase(w);
        if (std::find(uniq.begin(), uniq.end(), lw) == uniq.end()) uniq.push_back(lw);
    }
    std::sort(uniq.begin(), uniq.end());
    for (const auto& w : uniq) {
        word_to_id_[w] = static_cast<int>(id_to_word_.size());
        id_to_word_.push_back(w);
    }
}

TokenSequence ToyTokenizer::encode(const std::string& text) const {
    if (text.empty()) throw OverlongPrompt("empty text");
    TokenSequence seq;
    for (const auto& w : split_whitespace(lowercase(text))) {
        auto it = word_to_id_.find(w);
        if (it == word_to_id_.end())
            throw ConfigError("word not in toy vocabulary: '" + w + "'");
        seq.ids.push_back(it->second);
    }
    if (seq.ids.empty()) throw OverlongPrompt("empty text");
    if (static_cast<int>(seq.ids.size()) > max_tokens)
        throw OverlongPrompt("prompt of " + std::to_string(seq.ids.size()) +
                             " tokens exceeds budget of " + std::to_string(max_tokens));
    return seq;
}

std::string ToyTokenizer::decode(const TokenSequence& seq) const {
    std::string out;
    for (int id : seq.ids) {
        if (id < 0 || id >= vocab_size()) throw ConfigError("token id out of range");
        if (!out.empty()) out.push_back(' ');
        out += id_to_word_[static_cast<std::size_t>(id)];
    }
    return out;
}

std::shared_ptr<BpeTokenizer> BpeTokenizer::from_merges_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open merges file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return from_merges(lines);
}

std::shared_ptr<BpeTokenizer> BpeTokenizer::from_merges(
    const std::vector<std::string>& merge_lines) {
    auto t = std::shared_ptr<BpeTokenizer>(new BpeTokenizer());

    // Byte remap: printable ranges keep their code point, the rest shift to
    // 256+k, matching the reference byte encoder.
    std::vector<unsigned int> base;
    for (unsigned int b = '!'; b <= '~'; ++b) base.push_back(b);
    for (unsigned int b = 0xA1; b <= 0xAC; ++b) base.push_back(b);
    for (unsigned int b = 0xAE; b <= 0xFF; ++b) base.push_back(b);
    std::vector<int> mapped(256, -1);
    for (unsigned int b : base) mapped[b] = static_cast<int>(b);
    unsigned int next = 256;
    for (unsigned int b = 0; b < 256; ++b)
        if (mapped[b] < 0) mapped[b] = static_cast<int>(next++);
    for (unsigned int b = 0; b < 256; ++b) {
        const std::string sym = utf8(static_cast<unsigned int>(mapped[b]));
        t->byte_to_sym_[static_cast<unsigned char>(b)] = sym;
        t->sym_to_byte_[sym] = static_cast<unsigned char>(b);
    }

    // Vocabulary: 256 byte symbols, their </w> forms, merge products, specials.
    std::vector<std::string> vocab_order;
    for (unsigned int b = 0; b < 256; ++b)
        vocab_order.push_back(t->byte_to_sym_[static_cast<unsigned char>(b)]);
    for (unsigned int b = 0; b < 256; ++b)
        vocab_order.push_back(t->byte_to_sym_[static_cast<unsigned char>(b)] + "</w>");

    int rank = 0;
    for (const auto& raw : merge_lines) {
        if (raw.empty()) continue;
        if (raw.rfind("#version", 0) == 0) continue;
        std::istringstream is(raw);
        std::string a, b;
        if (!(is >> a >> b)) throw DataError("malformed merge line: '" + raw + "'");
        t->merge_rank_[{a, b}] = rank++;
        vocab_order.push_back(a + b);
    }
    vocab_order.push_back("<|startoftext|>");
    vocab_order.push_back("<|endoftext|>");

    for (const auto& s : vocab_order) {
        t->vocab_.emplace(s, static_cast<int>(t->id_to_symbol_.size()));
        t->id_to_symbol_.push_back(s);
    }
    t->sos_id_ = t->vocab_.at("<|startoftext|>");
    t->eos_id_ = t->vocab_.at("<|endoftext|>");
    return t;
}

std::vector<std::string> BpeTokenizer::bpe_word(const std::string& chunk) const {
    std::vector<std::string> word;
    for (unsigned char c : chunk) word.push_back(byte_to_sym_.at(c));
    if (word.empty()) return word;
    word.back() += "</w>";

    while (word.size() > 1) {
        int best_rank = -1;
        std::size_t best_pos = 0;
        for (std::size_t i = 0; i + 1 < word.size(); ++i) {
            auto it = merge_rank_.find({word[i], word[i + 1]});
            if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) {
                best_rank = it->second;
                best_pos = i;
            }
        }
        if (best_rank < 0) break;
        // merge every occurrence of the winning pair, left to right
        const std::string a = word[best_pos], b = word[best_pos + 1];
        std::vector<std::string> merged;
        for (std::size_t i = 0; i < word.size();) {
            if (i + 1 < word.size() && word[i] == a && word[i + 1] == b) {
                merged.push_back(a + b);
                i += 2;
            } else {
                merged.push_back(word[i]);
                i += 1;
            }
        }
        word = std::move(merged);
    }
    return word;
}

TokenSequence BpeTokenizer::encode(const std::string& text) const {
    if (text.empty()) throw OverlongPrompt("empty text");
    const std::string norm = lowercase(whitespace_clean(text));
    TokenSequence seq;
    for (const auto& chunk : regex_chunks(norm)) {
        for (const auto& sym : bpe_word(chunk)) {
            auto it = vocab_.find(sym);
            if (it == vocab_.end()) throw DataError("symbol missing from vocabulary: " + sym);
            seq.ids.push_back(it->second);
        }
    }
    if (seq.ids.empty()) throw OverlongPrompt("empty text");
    if (static_cast<int>(seq.ids.size()) > max_tokens)
        throw OverlongPrompt("prompt of " + std::to_string(seq.ids.size()) +
                             " tokens exceeds budget of " + std::to_string(max_tokens));
    return seq;
}

std::string BpeTokenizer::decode(const TokenSequence& seq) const {
    std::string symbols;
    for (int id : seq.ids) {
        if (id < 0 || id >= vocab_size()) throw ConfigError("token id out of range");
        symbols += id_to_symbol_[static_cast<std::size_t>(id)];
    }
    // replace </w> with spaces, then reverse the byte remap
    std::string spaced;
    for (std::size_t i = 0; i < symbols.size();) {
        if (symbols.compare(i, 4, "</w>") == 0) {
            spaced.push_back(' ');
            i += 4;
        } else {
            spaced.push_back(symbols[i]);
            ++i;
        }
    }
    std::string out;
    std::size_t i = 0;
    while (i < spaced.size()) {
        if (spaced[i] == ' ') {
            out.push_back(' ');
            ++i;
            continue;
        }
        bool matched = false;
        for (std::size_t len = 1; len <= 3 && i + len <= spaced.size(); ++len) {
            auto it = sym_to_byte_.find(spaced.substr(i, len));
            if (it != sym_to_byte_.end()) {
                out.push_back(static_cast<char>(it->second));
                i += len;
                matched = true;
                break;
            }
        }
        if (!matched) ++i;
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

}  // namespace vcpseg
