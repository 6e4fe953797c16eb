#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace criticgate {

using TokenId = int;

// Byte-level tokenizer: ids 0..255 are raw bytes, followed by the special
// tokens. Special ids are fixed constants so checkpoints and masks stay
// stable across runs.
struct Tokenizer {
    static constexpr TokenId kPad = 256;
    static constexpr TokenId kSep = 257;
    static constexpr TokenId kPass = 258;
    static constexpr TokenId kFail = 259;
    static constexpr int kVocabSize = 260;

    static std::vector<TokenId> encode(std::string_view text) {
        std::vector<TokenId> out;
        out.reserve(text.size());
        for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
        return out;
    }

    static std::string decode(const std::vector<TokenId>& tokens) {
        std::string out;
        out.reserve(tokens.size());
        for (TokenId t : tokens) {
            if (t < 0 || t >= kVocabSize) throw std::out_of_range("Tokenizer::decode: bad token id");
            if (t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
            // Specials decode to nothing; they never occur inside byte strings.
        }
        return out;
    }

    static const char* special_name(TokenId t) {
        switch (t) {
            case kPad: return "PAD";
            case kSep: return "SEP";
            case kPass: return "T_PASS";
            case kFail: return "T_FAIL";
            default: return nullptr;
        }
    }
};

}  // namespace criticgate
