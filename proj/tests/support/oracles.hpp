#pragma once

// Reference computations written independently of the library code paths.

#include <cmath>
#include <optional>
#include <regex>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace soft::oracle {

/// (prod 1/p_i)^(1/N) by direct multiplication in extended precision.
inline double direct_perplexity(std::span<const double> probs) {
    long double product = 1.0L;
    for (double p : probs) product *= 1.0L / static_cast<long double>(p);
    return static_cast<double>(std::pow(product, 1.0L / static_cast<long double>(probs.size())));
}

/// Additively smoothed conditional: (c + alpha) / (C + alpha * V).
inline double smoothed(double count, double context_total, double alpha, double vocab) {
    return (count + alpha) / (context_total + alpha * vocab);
}

/// Sum of the k smallest entries by repeated minimum extraction.
inline double k_smallest_sum(std::vector<double> v, std::size_t k) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < v.size(); ++j) {
            if (v[j] < v[best]) best = j;
        }
        s += v[best];
        v.erase(v.begin() + static_cast<std::ptrdiff_t>(best));
    }
    return s;
}

struct ParsedTemplate {
    std::size_t rule_count = 0;
    std::size_t example_count = 0;
    std::string question;
    bool well_formed = false;
};

/// Line-oriented reader of a rendered few-shot input. Rules are the lines
/// "<n> (<title>). <body>" between the rules and examples headers; each
/// demonstration contributes one internal-thoughts turn followed by one auto
/// reply; the question is the final "User: " line.
inline ParsedTemplate parse_template(const std::string& text, const std::string& rules_header,
                                     const std::string& examples_header, const std::string& thoughts_label,
                                     const std::string& reply_label) {
    ParsedTemplate out;
    std::vector<std::string> lines;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    if (lines.empty()) return out;

    static const std::regex rule_line(R"(^(\d+) \(([^)]*)\)\. .*$)");
    enum { before, rules, examples } section = before;
    std::size_t open_examples = 0;
    int expected_rule = 1;
    bool ordered = true;
    for (std::size_t i = 0; i + 1 < lines.size(); ++i) {
        const auto& l = lines[i];
        if (l == rules_header && section == before) {
            section = rules;
        } else if (l == examples_header && section == rules) {
            section = examples;
        } else if (section == rules) {
            std::smatch m;
            if (std::regex_match(l, m, rule_line)) {
                ordered = ordered && std::stoi(m[1]) == expected_rule++;
                ++out.rule_count;
            }
        } else if (section == examples) {
            if (l.rfind(thoughts_label + ": ", 0) == 0) {
                ++open_examples;
            } else if (l.rfind(reply_label + ": ", 0) == 0 && open_examples > 0) {
                --open_examples;
                ++out.example_count;
            }
        }
    }
    const std::string& last = lines.back();
    const std::string prefix = "User: ";
    if (last.rfind(prefix, 0) != 0) return out;
    out.question = last.substr(prefix.size());
    out.well_formed = section == examples && ordered && open_examples == 0;
    return out;
}

}  // namespace soft::oracle
