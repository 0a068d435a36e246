#pragma once

#include <istream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace tritide::csv {

inline bool needs_quoting(std::string_view field) {
    return field.find_first_of(",\"\r\n") != std::string_view::npos;
}

/// Appends one RFC-4180 field.
inline void append_field(std::string& out, std::string_view field) {
    if (!needs_quoting(field)) {
        out.append(field);
        return;
    }
    out.push_back('"');
    for (char c : field) {
        if (c == '"') {
            out.push_back('"');
        }
        out.push_back(c);
    }
    out.push_back('"');
}

template <class Range>
std::string join(const Range& fields) {
    std::string out;
    bool first = true;
    for (const auto& f : fields) {
        if (!first) {
            out.push_back(',');
        }
        first = false;
        append_field(out, f);
    }
    return out;
}

/// Splits a single logical record. Returns nullopt on an unterminated quote.
inline std::optional<std::vector<std::string>> split(std::string_view line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    bool field_started_quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(c);
            }
            continue;
        }
        if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
            field_started_quoted = false;
        } else if (c == '"' && cur.empty() && !field_started_quoted) {
            quoted = true;
            field_started_quoted = true;
        } else if (c == '\r' && i + 1 == line.size()) {
            // tolerate CRLF
        } else {
            cur.push_back(c);
        }
    }
    if (quoted) {
        return std::nullopt;
    }
    fields.push_back(std::move(cur));
    return fields;
}

/// Streams records, joining physical lines while a quoted field is open.
class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}

    /// Next record's fields; nullopt at end of input. Blank lines are skipped.
    std::optional<std::vector<std::string>> next() {
        std::string line;
        while (std::getline(in_, line)) {
            ++line_no_;
            if (line.empty() || line == "\r") {
                continue;
            }
            auto fields = split(line);
            while (!fields) {
                std::string more;
                if (!std::getline(in_, more)) {
                    // unterminated quote at EOF: hand back the raw line as one field
                    return std::vector<std::string>{line};
                }
                ++line_no_;
                line += "\n";
                line += more;
                fields = split(line);
            }
            return fields;
        }
        return std::nullopt;
    }

    std::size_t line_number() const { return line_no_; }

private:
    std::istream& in_;
    std::size_t line_no_ = 0;
};

} // namespace tritide::csv
