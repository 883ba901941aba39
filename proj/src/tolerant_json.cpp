#include "keyfield/tolerant_json.hpp"

#include <cctype>
#include <charconv>
#include <cstdint>
#include <optional>
#include <string>

#include "keyfield/error.hpp"

namespace keyfield {
namespace {

using Json = nlohmann::ordered_json;

struct SyntaxError {
  std::size_t offset;
  const char* what;
};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }
bool is_delimiter(char c) { return c == ',' || c == '}' || c == ']' || c == ':'; }

void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

class Parser {
 public:
  Parser(std::string_view text, std::size_t pos) : text_(text), pos_(pos) {}

  Json parse_object() {
    expect('{');
    Json obj = Json::object();
    for (;;) {
      skip_ws();
      if (peek() == '}') {
        ++pos_;
        return obj;
      }
      if (peek() == ',') {  // tolerate stray / trailing commas
        ++pos_;
        continue;
      }
      std::string key = parse_key();
      skip_ws();
      if (peek() == ':') {
        ++pos_;
        obj[key] = parse_value();
      } else if (const auto colon = key.find(':'); colon != std::string::npos) {
        // The key swallowed its colon and possibly its value.
        obj[trim(std::string_view(key).substr(0, colon))] =
            inline_value(std::string_view(key).substr(colon + 1));
      } else {
        throw SyntaxError{pos_, "expected ':' after key"};
      }
      skip_ws();
      if (peek() == ',') ++pos_;
    }
  }

  std::size_t pos() const { return pos_; }

 private:
  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }
  bool at_end() const { return pos_ >= text_.size(); }

  void skip_ws() {
    while (!at_end() && is_space(text_[pos_])) ++pos_;
  }

  void expect(char c) {
    skip_ws();
    if (peek() != c) throw SyntaxError{pos_, "unexpected character"};
    ++pos_;
  }

  std::string parse_key() {
    const char c = peek();
    if (c == '"' || c == '\'') return parse_string();
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      const std::size_t start = pos_;
      while (!at_end() && text_[pos_] != ':' && text_[pos_] != '\n' && text_[pos_] != '}' &&
             text_[pos_] != ',') {
        ++pos_;
      }
      return trim(text_.substr(start, pos_ - start));
    }
    throw SyntaxError{pos_, "expected object key"};
  }

  Json parse_value() {
    skip_ws();
    const char c = peek();
    if (c == '{') return parse_object();
    if (c == '[') return parse_array();
    if (c == '"' || c == '\'') return Json(parse_string());
    if (c == '-' || c == '+' || std::isdigit(static_cast<unsigned char>(c))) return parse_number();
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return parse_bare();
    throw SyntaxError{pos_, "expected a value"};
  }

  Json parse_array() {
    expect('[');
    Json arr = Json::array();
    for (;;) {
      skip_ws();
      if (peek() == ']') {
        ++pos_;
        return arr;
      }
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      if (text_.substr(pos_, 3) == "...") {  // schema ellipsis echoed back
        pos_ += 3;
        continue;
      }
      arr.push_back(parse_value());
      skip_ws();
      if (peek() == ',') {
        ++pos_;
      } else if (peek() != ']') {
        throw SyntaxError{pos_, "expected ',' or ']' in array"};
      }
    }
  }

  // A quote closes the string only when followed (after whitespace) by a
  // structural character or the end of input; otherwise it is treated as an
  // apostrophe or an inner quote. Strict JSON always satisfies this rule.
  bool closes_here(std::size_t quote_pos) const {
    std::size_t i = quote_pos + 1;
    while (i < text_.size() && is_space(text_[i])) ++i;
    return i >= text_.size() || is_delimiter(text_[i]);
  }

  std::string parse_string() {
    const char quote = text_[pos_++];
    std::string out;
    while (!at_end()) {
      const char c = text_[pos_];
      if (c == quote) {
        if (closes_here(pos_)) {
          ++pos_;
          return out;
        }
        out += c;
        ++pos_;
        continue;
      }
      if (c == '\\') {
        ++pos_;
        if (at_end()) break;
        const char e = text_[pos_++];
        switch (e) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case 'r': out += '\r'; break;
          case 'b': out += '\b'; break;
          case 'f': out += '\f'; break;
          case 'u': out += parse_unicode_escape(); break;
          default: out += e; break;  // \" \' \\ \/ and unknown escapes
        }
        continue;
      }
      out += c;
      ++pos_;
    }
    throw SyntaxError{pos_, "unterminated string"};
  }

  std::uint32_t read_hex4() {
    if (pos_ + 4 > text_.size()) throw SyntaxError{pos_, "truncated \\u escape"};
    std::uint32_t v = 0;
    const auto res = std::from_chars(text_.data() + pos_, text_.data() + pos_ + 4, v, 16);
    if (res.ec != std::errc{} || res.ptr != text_.data() + pos_ + 4) {
      throw SyntaxError{pos_, "bad \\u escape"};
    }
    pos_ += 4;
    return v;
  }

  std::string parse_unicode_escape() {
    std::uint32_t cp = read_hex4();
    if (cp >= 0xD800 && cp <= 0xDBFF && text_.substr(pos_, 2) == "\\u") {
      pos_ += 2;
      const std::uint32_t low = read_hex4();
      if (low >= 0xDC00 && low <= 0xDFFF) {
        cp = 0x10000 + ((cp - 0xD800) << 10) + (low - 0xDC00);
      }
    }
    std::string out;
    append_utf8(out, cp);
    return out;
  }

  Json parse_number() {
    const std::size_t start = pos_;
    if (peek() == '-' || peek() == '+') ++pos_;
    bool integral = true;
    while (!at_end()) {
      const char c = text_[pos_];
      if (std::isdigit(static_cast<unsigned char>(c))) {
        ++pos_;
      } else if (c == '.' || c == 'e' || c == 'E' ||
                 ((c == '-' || c == '+') && (text_[pos_ - 1] == 'e' || text_[pos_ - 1] == 'E'))) {
        integral = false;
        ++pos_;
      } else {
        break;
      }
    }
    std::string_view token = text_.substr(start, pos_ - start);
    if (!token.empty() && token.front() == '+') token.remove_prefix(1);
    if (integral) {
      std::int64_t v = 0;
      const auto res = std::from_chars(token.data(), token.data() + token.size(), v);
      if (res.ec == std::errc{} && res.ptr == token.data() + token.size()) return Json(v);
    }
    try {
      std::size_t used = 0;
      const double d = std::stod(std::string(token), &used);
      if (used == token.size()) return Json(d);
    } catch (const std::exception&) {
    }
    throw SyntaxError{start, "malformed number"};
  }

  Json parse_bare() {
    const std::size_t start = pos_;
    while (!at_end() && text_[pos_] != ',' && text_[pos_] != '}' && text_[pos_] != ']' &&
           text_[pos_] != '\n') {
      ++pos_;
    }
    const std::string word = trim(text_.substr(start, pos_ - start));
    if (word == "true" || word == "True") return Json(true);
    if (word == "false" || word == "False") return Json(false);
    if (word == "null" || word == "None") return Json(nullptr);
    return Json(word);
  }

  static Json inline_value(std::string_view rest) {
    const std::string body = trim(rest);
    if (!body.empty()) {
      try {
        Parser inner(body, 0);
        Json v = inner.parse_value();
        inner.skip_ws();
        if (inner.at_end()) return v;
      } catch (const SyntaxError&) {
      }
    }
    std::string stripped = body;
    while (!stripped.empty() && (stripped.front() == '"' || stripped.front() == '\'')) {
      stripped.erase(stripped.begin());
    }
    while (!stripped.empty() && (stripped.back() == '"' || stripped.back() == '\'')) {
      stripped.pop_back();
    }
    return Json(stripped);
  }

  std::string_view text_;
  std::size_t pos_;
};

}  // namespace

nlohmann::ordered_json tolerant_json_extract(std::string_view reply) {
  std::optional<SyntaxError> first_error;
  for (std::size_t start = reply.find('{'); start != std::string_view::npos;
       start = reply.find('{', start + 1)) {
    try {
      Parser parser(reply, start);
      return parser.parse_object();
    } catch (const SyntaxError& e) {
      if (!first_error) first_error = e;
    }
  }
  if (!first_error) throw Error(ErrorCode::parse_failure, "no JSON object found in reply");
  throw Error(ErrorCode::parse_failure,
              std::string("unrecoverable JSON syntax in reply: ") + first_error->what +
                  " at offset " + std::to_string(first_error->offset));
}

}  // namespace keyfield
