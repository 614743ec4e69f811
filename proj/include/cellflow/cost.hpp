#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/error.hpp"
#include "cellflow/llm.hpp"

namespace cellflow {

enum class CostErrorCode { BadAmount, UnknownModel, Overflow };

class CostError : public CodedError<CostErrorCode> {
public:
    using CodedError::CodedError;
};

/// Fixed-point money in units of 1e-12.
class Money {
public:
    static constexpr std::int64_t kScale = 1'000'000'000'000;

    constexpr Money() = default;
    static constexpr Money from_units(std::int64_t units) { return Money(units); }
    /// Parses "12", "0.15", "-3.000001"; at most 12 fractional digits.
    static Money parse(std::string_view decimal);

    std::int64_t units() const { return units_; }
    /// Shortest exact decimal, e.g. "0.45", "0", "-1.5".
    std::string to_string() const;
    double to_double() const { return static_cast<double>(units_) / static_cast<double>(kScale); }

    Money& operator+=(Money other);
    friend Money operator+(Money a, Money b) { return a += b; }
    friend auto operator<=>(const Money&, const Money&) = default;

private:
    constexpr explicit Money(std::int64_t units) : units_(units) {}
    std::int64_t units_ = 0;
};

/// Prices per 1K tokens. Stored per token, so at most 9 fractional digits
/// are accepted for the per-1K figure.
struct ModelPrice {
    Money input_per_1k;
    Money output_per_1k;
};

class PriceTable {
public:
    /// {"model": {"input_per_1k": "0.15", "output_per_1k": "0.60"}, ...}.
    /// Prices may be strings or numbers; strings are parsed exactly.
    static PriceTable from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    void set(const std::string& model, ModelPrice price);
    bool contains(const std::string& model) const { return prices_.count(model) > 0; }
    bool empty() const { return prices_.empty(); }
    const ModelPrice& at(const std::string& model) const;

private:
    std::map<std::string, ModelPrice> prices_;
};

/// prompt_tokens/1000 * p_in + completion_tokens/1000 * p_out, exactly.
Money accumulate_cost(const Usage& usage, const ModelPrice& price);
Money accumulate_cost(const Usage& usage, const PriceTable& table, const std::string& model);

class CostLedger {
public:
    struct Entry {
        std::string model;
        Usage usage;
        Money cost;
    };

    explicit CostLedger(PriceTable table = {});

    /// Records one call. With an empty price table every call costs 0.
    Money record(const std::string& model, const Usage& usage);
    Money total() const;
    std::vector<Entry> entries() const;
    const PriceTable& prices() const { return table_; }

private:
    PriceTable table_;
    mutable std::mutex mu_;
    std::vector<Entry> entries_;
    Money total_;
};

}  // namespace cellflow
