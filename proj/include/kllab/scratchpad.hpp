#pragma once

// Addition-with-scratchpad task: problem sampling, rendering, answer checking
// and the character-level vocabulary.
//
// A rendered document for 128+367 looks like
//
//   128+367=
//   [1,2,8] has 3 digits.
//   [3,6,7] has 3 digits.
//   [1,2,8] + [3,6,7] , A=[] , C=0 , 8+7+0=15 , A->5 , C->1
//   [1,2] + [3,6] , A=[5] , C=1 , 2+6+1=9 , A->9 , C->0
//   [1] + [3] , A=[9,5] , C=0 , 1+3+0=4 , A->4 , C->0
//   [] + [] , A=[4,9,5] , C=0 , END
//   4 9 5
//
// followed by the end-of-sequence token.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kllab/rng.hpp"

namespace kllab {

using TokenId = std::int32_t;

inline bool is_digit_string(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s)
    if (c < '0' || c > '9') return false;
  return s.size() == 1 || s.front() != '0';
}

struct AdditionProblem {
  std::string a;  // decimal digits, most significant first
  std::string b;

  static AdditionProblem from_digits(std::string a, std::string b) {
    if (!is_digit_string(a) || !is_digit_string(b))
      throw std::invalid_argument("operands must be canonical decimal numbers: '" + a +
                                  "', '" + b + "'");
    return AdditionProblem{std::move(a), std::move(b)};
  }

  std::size_t len_a() const { return a.size(); }
  std::size_t len_b() const { return b.size(); }
  std::size_t longest() const { return std::max(a.size(), b.size()); }

  bool operator==(const AdditionProblem&) const = default;
};

// Schoolbook addition on digit strings.
inline std::string add_decimal(std::string_view a, std::string_view b) {
  std::string out;
  int carry = 0;
  for (std::size_t i = 0; i < std::max(a.size(), b.size()); ++i) {
    int x = i < a.size() ? a[a.size() - 1 - i] - '0' : 0;
    int y = i < b.size() ? b[b.size() - 1 - i] - '0' : 0;
    int s = x + y + carry;
    out.push_back(static_cast<char>('0' + s % 10));
    carry = s / 10;
  }
  if (carry) out.push_back('1');
  return {out.rbegin(), out.rend()};
}

struct ScratchpadDoc {
  AdditionProblem problem;
  std::string prompt_text;
  std::string body_text;
  std::string answer_text;

  std::string full_text() const { return prompt_text + body_text + answer_text; }
};

namespace detail {

inline std::string digit_list(std::string_view digits) {
  std::string out = "[";
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i) out.push_back(',');
    out.push_back(digits[i]);
  }
  out.push_back(']');
  return out;
}

}  // namespace detail

inline std::string render_prompt(const AdditionProblem& p) { return p.a + "+" + p.b + "=\n"; }

inline constexpr std::string_view kAnswerDelimiter = "END\n";

inline ScratchpadDoc render_scratchpad(const AdditionProblem& p) {
  ScratchpadDoc doc{p, render_prompt(p), {}, {}};
  std::string& body = doc.body_text;
  body += detail::digit_list(p.a) + " has " + std::to_string(p.len_a()) + " digits.\n";
  body += detail::digit_list(p.b) + " has " + std::to_string(p.len_b()) + " digits.\n";

  std::string_view ra = p.a;
  std::string_view rb = p.b;
  std::string answer;  // most significant first
  int carry = 0;
  for (std::size_t step = 0; step < p.longest(); ++step) {
    const int x = ra.empty() ? 0 : ra.back() - '0';
    const int y = rb.empty() ? 0 : rb.back() - '0';
    const int s = x + y + carry;
    const int unit = s % 10;
    const int next_carry = s / 10;
    body += detail::digit_list(ra) + " + " + detail::digit_list(rb) +
            " , A=" + detail::digit_list(answer) + " , C=" + std::to_string(carry) + " , " +
            std::to_string(x) + "+" + std::to_string(y) + "+" + std::to_string(carry) + "=" +
            std::to_string(s) + " , A->" + std::to_string(unit) +
            " , C->" + std::to_string(next_carry) + "\n";
    answer.insert(answer.begin(), static_cast<char>('0' + unit));
    carry = next_carry;
    if (!ra.empty()) ra.remove_suffix(1);
    if (!rb.empty()) rb.remove_suffix(1);
  }
  body += "[] + [] , A=" + detail::digit_list(answer) + " , C=" + std::to_string(carry) + " , " +
          std::string(kAnswerDelimiter);

  if (carry) answer.insert(answer.begin(), '1');
  for (std::size_t i = 0; i < answer.size(); ++i) {
    if (i) doc.answer_text.push_back(' ');
    doc.answer_text.push_back(answer[i]);
  }
  return doc;
}

enum class Verdict { correct, incorrect, malformed };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::correct: return "correct";
    case Verdict::incorrect: return "incorrect";
    case Verdict::malformed: return "malformed";
  }
  return "?";
}

inline constexpr char kEosChar = '$';

// The answer is the text after the last "END\n", up to the end-of-sequence
// marker or end of text, as single digits separated by single spaces.
inline std::optional<std::string> extract_answer(std::string_view text) {
  const auto at = text.rfind(kAnswerDelimiter);
  if (at == std::string_view::npos) return std::nullopt;
  std::string_view line = text.substr(at + kAnswerDelimiter.size());
  if (auto eos = line.find(kEosChar); eos != std::string_view::npos) line = line.substr(0, eos);
  if (!line.empty() && line.back() == '\n') line.remove_suffix(1);
  if (line.empty() || line.size() % 2 == 0) return std::nullopt;
  std::string digits;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (i % 2 == 0) {
      if (c < '0' || c > '9') return std::nullopt;
      digits.push_back(c);
    } else if (c != ' ') {
      return std::nullopt;
    }
  }
  return digits;
}

inline Verdict verify_answer(std::string_view generated_text, const AdditionProblem& p) {
  auto digits = extract_answer(generated_text);
  if (!digits) return Verdict::malformed;
  return *digits == add_decimal(p.a, p.b) ? Verdict::correct : Verdict::incorrect;
}

class TokenizerError : public std::runtime_error {
 public:
  TokenizerError(const std::string& what, std::size_t position)
      : std::runtime_error(what), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

// Character-level vocabulary. Id 0 is the end-of-sequence symbol.
class Vocabulary {
 public:
  static const Vocabulary& standard() {
    static const Vocabulary v(std::string(1, kEosChar) + "0123456789[],+=->.ACEND \nhasdigt");
    return v;
  }

  explicit Vocabulary(std::string symbols) : symbols_(std::move(symbols)) {
    id_of_.fill(-1);
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      auto& slot = id_of_[static_cast<unsigned char>(symbols_[i])];
      if (slot != -1) throw std::invalid_argument("duplicate vocabulary symbol");
      slot = static_cast<TokenId>(i);
    }
  }

  int size() const { return static_cast<int>(symbols_.size()); }
  TokenId eos() const { return 0; }
  const std::string& symbols() const { return symbols_; }

  bool contains(char c) const { return id_of_[static_cast<unsigned char>(c)] >= 0; }

  TokenId id_of(char c) const {
    const TokenId id = id_of_[static_cast<unsigned char>(c)];
    if (id < 0) throw TokenizerError(std::string("unknown character '") + c + "'", 0);
    return id;
  }

  char char_of(TokenId id) const {
    if (id < 0 || id >= size())
      throw TokenizerError("token id " + std::to_string(id) + " out of range", 0);
    return symbols_[static_cast<std::size_t>(id)];
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      const TokenId id = id_of_[static_cast<unsigned char>(text[i])];
      if (id < 0)
        throw TokenizerError(std::string("unknown character '") + text[i] + "' at position " +
                                 std::to_string(i),
                             i);
      ids.push_back(id);
    }
    return ids;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string text;
    text.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= size())
        throw TokenizerError("token id " + std::to_string(ids[i]) + " out of range at position " +
                                 std::to_string(i),
                             i);
      text.push_back(symbols_[static_cast<std::size_t>(ids[i])]);
    }
    return text;
  }

 private:
  std::string symbols_;
  std::array<TokenId, 256> id_of_{};
};

// Training sequence for a document: its characters followed by EOS.
inline std::vector<TokenId> encode_document(const ScratchpadDoc& doc,
                                            const Vocabulary& vocab = Vocabulary::standard()) {
  auto ids = vocab.encode(doc.full_text());
  ids.push_back(vocab.eos());
  return ids;
}

// ---------------------------------------------------------------------------
// Sampling

inline std::string sample_operand(int length, Rng& rng) {
  std::string s;
  for (int i = 0; i < length; ++i) {
    const int lo = (i == 0 && length > 1) ? 1 : 0;
    s.push_back(static_cast<char>('0' + uniform_int(rng, lo, 9)));
  }
  return s;
}

// Length class (len_a, len_b) uniform over [1, n_max]^2, digits uniform within
// the class.
inline AdditionProblem sample_problem(int n_max, Rng& rng) {
  if (n_max < 1) throw std::invalid_argument("n_max must be >= 1");
  const int la = static_cast<int>(uniform_int(rng, 1, n_max));
  const int lb = static_cast<int>(uniform_int(rng, 1, n_max));
  std::string a = sample_operand(la, rng);
  return {std::move(a), sample_operand(lb, rng)};
}

inline AdditionProblem sample_problem_in_class(int len_a, int len_b, Rng& rng) {
  std::string a = sample_operand(len_a, rng);
  return {std::move(a), sample_operand(len_b, rng)};
}

// Both operands exactly n digits.
inline AdditionProblem sample_problem_identical(int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("digit length must be >= 1");
  return sample_problem_in_class(n, n, rng);
}

// Longer operand exactly n digits, the other uniform in [1, n], random order.
inline AdditionProblem sample_problem_longest(int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("digit length must be >= 1");
  const int other = static_cast<int>(uniform_int(rng, 1, n));
  const bool long_first = uniform_int(rng, 0, 1) == 0;
  return long_first ? sample_problem_in_class(n, other, rng)
                    : sample_problem_in_class(other, n, rng);
}

}  // namespace kllab
