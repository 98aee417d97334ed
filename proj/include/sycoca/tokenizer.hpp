// Byte-level BPE tokenizer. The base alphabet is all 256 bytes, so encode
// never needs UNK; UNK is kept only so a corrupt vocabulary file has a
// defined id to complain about. Specials occupy fixed ids 0..4 and never
// take part in merges.
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "sycoca/errors.hpp"

namespace sycoca {

constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kClsId = 3;
constexpr int kUnkId = 4;
constexpr int kNumSpecials = 5;
constexpr int kFirstByteId = kNumSpecials;            // byte b <-> id 5 + b
constexpr int kBaseVocab = kNumSpecials + 256;        // 261
inline constexpr const char* kVocabMagic = "SYCOCA-BPE v1";

inline bool is_special_id(int id) { return id >= 0 && id < kNumSpecials; }

struct Vocabulary {
    // merges[r] holds the byte strings joined by the merge of rank r; the
    // resulting token has id kBaseVocab + r.
    std::vector<std::pair<std::string, std::string>> merges;
    std::unordered_map<std::string, int> token_to_id;
    std::vector<std::string> id_to_token;  // specials hold display names, not bytes
    int size = 0;
};

struct TokenSequence {
    std::vector<int> ids;
    int length = 0;                  // non-PAD count (BOS/EOS/CLS included)
    std::vector<std::uint8_t> pad_mask;  // 1 = real token

    int max_len() const { return static_cast<int>(ids.size()); }
    int cls_pos() const { return length - 1; }
};

namespace detail {

inline void apply_merge(std::vector<int>& toks, int left, int right, int merged) {
    std::size_t w = 0;
    for (std::size_t i = 0; i < toks.size();) {
        if (i + 1 < toks.size() && toks[i] == left && toks[i + 1] == right) {
            toks[w++] = merged;
            i += 2;
        } else {
            toks[w++] = toks[i++];
        }
    }
    toks.resize(w);
}

inline std::string to_hex(const std::string& bytes) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (unsigned char c : bytes) {
        out.push_back(digits[c >> 4]);
        out.push_back(digits[c & 0xf]);
    }
    return out;
}

inline std::string from_hex(const std::string& hex, int line_no) {
    auto nibble = [&](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        throw FormatError("vocabulary line " + std::to_string(line_no) + ": bad hex digit");
    };
    if (hex.empty() || hex.size() % 2 != 0)
        throw FormatError("vocabulary line " + std::to_string(line_no) + ": odd hex length");
    std::string out;
    out.reserve(hex.size() / 2);
    for (std::size_t i = 0; i < hex.size(); i += 2)
        out.push_back(static_cast<char>((nibble(hex[i]) << 4) | nibble(hex[i + 1])));
    return out;
}

// Replaces ill-formed UTF-8 sequences with U+FFFD, one replacement per
// rejected byte.
inline std::string sanitize_utf8(const std::string& s) {
    static const char* kRepl = "\xEF\xBF\xBD";
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    const std::size_t n = s.size();
    while (i < n) {
        const unsigned char c = static_cast<unsigned char>(s[i]);
        if (c < 0x80) {
            out.push_back(static_cast<char>(c));
            ++i;
            continue;
        }
        int len = 0;
        std::uint32_t cp = 0;
        if ((c & 0xE0) == 0xC0) {
            len = 2;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            len = 3;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            len = 4;
            cp = c & 0x07;
        } else {
            out += kRepl;
            ++i;
            continue;
        }
        bool ok = i + len <= n;
        for (int k = 1; ok && k < len; ++k) {
            const unsigned char cc = static_cast<unsigned char>(s[i + k]);
            if ((cc & 0xC0) != 0x80) ok = false;
            cp = (cp << 6) | (cc & 0x3F);
        }
        if (ok) {
            if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000))
                ok = false;                                   // overlong
            if (cp >= 0xD800 && cp <= 0xDFFF) ok = false;     // surrogate
            if (cp > 0x10FFFF) ok = false;
        }
        if (ok) {
            out.append(s, i, len);
            i += len;
        } else {
            out += kRepl;
            ++i;
        }
    }
    return out;
}

inline Vocabulary base_vocabulary() {
    Vocabulary v;
    v.id_to_token = {"<pad>", "<bos>", "<eos>", "<cls>", "<unk>"};
    v.id_to_token.reserve(kBaseVocab);
    for (int b = 0; b < 256; ++b) v.id_to_token.push_back(std::string(1, static_cast<char>(b)));
    for (int b = 0; b < 256; ++b) v.token_to_id[v.id_to_token[kFirstByteId + b]] = kFirstByteId + b;
    v.size = kBaseVocab;
    return v;
}

inline void register_merge(Vocabulary& v, const std::string& left, const std::string& right) {
    v.merges.emplace_back(left, right);
    const std::string tok = left + right;
    v.id_to_token.push_back(tok);
    v.token_to_id[tok] = v.size;
    v.size += 1;
}

}  // namespace detail

inline Vocabulary train_bpe(const std::vector<std::string>& corpus, int vocab_size) {
    if (vocab_size <= kBaseVocab)
        throw ConfigError("train_bpe: vocab_size must exceed " + std::to_string(kBaseVocab) +
                          " (5 specials + 256 byte tokens), got " + std::to_string(vocab_size));
    if (corpus.empty()) throw ConfigError("train_bpe: empty corpus");

    Vocabulary v = detail::base_vocabulary();
    std::vector<std::vector<int>> lines;
    lines.reserve(corpus.size());
    for (const auto& s : corpus) {
        std::vector<int> toks;
        toks.reserve(s.size());
        for (unsigned char c : s) toks.push_back(kFirstByteId + c);
        lines.push_back(std::move(toks));
    }

    while (v.size < vocab_size) {
        // Count adjacent pairs; select by (frequency desc, pair bytes lex asc).
        std::map<std::pair<int, int>, long long> counts;
        for (const auto& toks : lines)
            for (std::size_t i = 0; i + 1 < toks.size(); ++i)
                counts[{toks[i], toks[i + 1]}] += 1;
        if (counts.empty()) break;  // corpus exhausted

        std::pair<int, int> best{-1, -1};
        std::pair<std::string, std::string> best_str;
        long long best_count = 0;
        for (const auto& [pair, count] : counts) {
            std::pair<std::string, std::string> str{v.id_to_token[pair.first],
                                                    v.id_to_token[pair.second]};
            if (count > best_count || (count == best_count && str < best_str)) {
                best = pair;
                best_str = std::move(str);
                best_count = count;
            }
        }

        const int merged_id = v.size;
        detail::register_merge(v, best_str.first, best_str.second);
        for (auto& toks : lines) detail::apply_merge(toks, best.first, best.second, merged_id);
    }
    return v;
}

inline TokenSequence encode(const Vocabulary& vocab, const std::string& text, int max_len) {
    if (max_len < 4)
        throw ConfigError("encode: max_len must be >= 4 (BOS + token + EOS + CLS), got " +
                          std::to_string(max_len));

    std::vector<int> toks;
    toks.reserve(text.size());
    for (unsigned char c : text) toks.push_back(kFirstByteId + c);
    for (std::size_t r = 0; r < vocab.merges.size(); ++r) {
        const auto& m = vocab.merges[r];
        const int left = vocab.token_to_id.at(m.first);
        const int right = vocab.token_to_id.at(m.second);
        detail::apply_merge(toks, left, right, kBaseVocab + static_cast<int>(r));
    }

    const int budget = max_len - 3;
    if (static_cast<int>(toks.size()) > budget) toks.resize(budget);

    TokenSequence seq;
    seq.ids.reserve(max_len);
    seq.ids.push_back(kBosId);
    seq.ids.insert(seq.ids.end(), toks.begin(), toks.end());
    seq.ids.push_back(kEosId);
    seq.ids.push_back(kClsId);
    seq.length = static_cast<int>(seq.ids.size());
    seq.ids.resize(max_len, kPadId);
    seq.pad_mask.assign(max_len, 0);
    for (int i = 0; i < seq.length; ++i) seq.pad_mask[i] = 1;
    return seq;
}

inline std::string decode(const Vocabulary& vocab, const std::vector<int>& ids) {
    std::string bytes;
    for (int id : ids) {
        if (id < 0 || id >= vocab.size)
            throw InputError("decode: token id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(vocab.size) + ")");
        if (is_special_id(id)) continue;
        bytes += vocab.id_to_token[id];
    }
    return detail::sanitize_utf8(bytes);
}

// --- vocabulary file (see README for the format) ---

inline std::string serialize_vocabulary(const Vocabulary& v) {
    std::ostringstream out;
    out << kVocabMagic << "\n" << v.size << "\n";
    for (const auto& m : v.merges)
        out << detail::to_hex(m.first) << " " << detail::to_hex(m.second) << "\n";
    return out.str();
}

inline void save_vocabulary(const Vocabulary& v, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open vocabulary file for writing: " + path);
    f << serialize_vocabulary(v);
    if (!f) throw IoError("failed writing vocabulary file: " + path);
}

inline Vocabulary parse_vocabulary(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kVocabMagic)
        throw FormatError("vocabulary line 1: expected \"" + std::string(kVocabMagic) + "\"");
    if (!std::getline(in, line)) throw FormatError("vocabulary line 2: missing size");
    int size = 0;
    try {
        size = std::stoi(line);
    } catch (const std::exception&) {
        throw FormatError("vocabulary line 2: bad size \"" + line + "\"");
    }
    if (size < kBaseVocab) throw FormatError("vocabulary line 2: size below base alphabet");

    Vocabulary v = detail::base_vocabulary();
    int line_no = 3;
    while (std::getline(in, line)) {
        if (line.empty()) break;
        const auto sp = line.find(' ');
        if (sp == std::string::npos)
            throw FormatError("vocabulary line " + std::to_string(line_no) + ": expected two fields");
        const std::string left = detail::from_hex(line.substr(0, sp), line_no);
        const std::string right = detail::from_hex(line.substr(sp + 1), line_no);
        if (!v.token_to_id.count(left) || !v.token_to_id.count(right))
            throw FormatError("vocabulary line " + std::to_string(line_no) +
                              ": merge refers to unknown token");
        detail::register_merge(v, left, right);
        ++line_no;
    }
    if (v.size != size)
        throw FormatError("vocabulary: declared size " + std::to_string(size) + " but found " +
                          std::to_string(v.size) + " tokens");
    return v;
}

inline Vocabulary load_vocabulary(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open vocabulary file: " + path);
    return parse_vocabulary(f);
}

}  // namespace sycoca
