#include "cellflow/cost.hpp"

#include <cctype>
#include <limits>

namespace cellflow {

using nlohmann::json;

Money Money::parse(std::string_view s) {
    const std::string original(s);
    bool negative = false;
    if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
        negative = s.front() == '-';
        s.remove_prefix(1);
    }
    const auto dot = s.find('.');
    const auto whole = s.substr(0, dot);
    const auto frac = dot == std::string_view::npos ? std::string_view{} : s.substr(dot + 1);
    if (whole.empty() && frac.empty()) throw CostError(CostErrorCode::BadAmount, "not a decimal: '" + original + "'");
    if (frac.size() > 12) throw CostError(CostErrorCode::BadAmount, "more than 12 fractional digits: " + original);

    __int128 units = 0;
    for (char c : whole) {
        if (!std::isdigit(static_cast<unsigned char>(c))) {
            throw CostError(CostErrorCode::BadAmount, "not a decimal: '" + original + "'");
        }
        units = units * 10 + (c - '0');
        if (units > std::numeric_limits<std::int64_t>::max() / kScale) {
            throw CostError(CostErrorCode::Overflow, "amount out of range: " + original);
        }
    }
    units *= kScale;
    std::int64_t place = kScale;
    for (char c : frac) {
        if (!std::isdigit(static_cast<unsigned char>(c))) {
            throw CostError(CostErrorCode::BadAmount, "not a decimal: '" + original + "'");
        }
        place /= 10;
        units += static_cast<__int128>(c - '0') * place;
    }
    return Money(static_cast<std::int64_t>(negative ? -units : units));
}

std::string Money::to_string() const {
    const bool negative = units_ < 0;
    const auto magnitude = negative ? -static_cast<__int128>(units_) : static_cast<__int128>(units_);
    const auto whole = static_cast<std::int64_t>(magnitude / kScale);
    auto frac = static_cast<std::int64_t>(magnitude % kScale);
    std::string out = (negative ? "-" : "") + std::to_string(whole);
    if (frac != 0) {
        std::string digits = std::to_string(frac);
        digits.insert(0, 12 - digits.size(), '0');
        while (digits.back() == '0') digits.pop_back();
        out += "." + digits;
    }
    return out;
}

Money& Money::operator+=(Money other) {
    if (__builtin_add_overflow(units_, other.units_, &units_)) {
        throw CostError(CostErrorCode::Overflow, "money overflow");
    }
    return *this;
}

namespace {

Money parse_price(const json& v, const std::string& what) {
    Money m;
    if (v.is_string()) {
        m = Money::parse(v.get<std::string>());
    } else if (v.is_number()) {
        // Numbers go through their shortest round-trip text form.
        m = Money::parse(v.dump());
    } else {
        throw CostError(CostErrorCode::BadAmount, what + " must be a decimal string or number");
    }
    if (m.units() < 0) throw CostError(CostErrorCode::BadAmount, what + " is negative");
    if (m.units() % 1000 != 0) {
        throw CostError(CostErrorCode::BadAmount, what + " has more than 9 fractional digits");
    }
    return m;
}

}  // namespace

PriceTable PriceTable::from_json(const json& j) {
    PriceTable t;
    if (j.is_null()) return t;
    if (!j.is_object()) throw CostError(CostErrorCode::BadAmount, "pricing must be an object keyed by model");
    for (const auto& [model, p] : j.items()) {
        if (!p.is_object() || !p.contains("input_per_1k") || !p.contains("output_per_1k")) {
            throw CostError(CostErrorCode::BadAmount, "pricing." + model + " needs input_per_1k and output_per_1k");
        }
        t.set(model, ModelPrice{parse_price(p["input_per_1k"], "pricing." + model + ".input_per_1k"),
                                parse_price(p["output_per_1k"], "pricing." + model + ".output_per_1k")});
    }
    return t;
}

json PriceTable::to_json() const {
    json j = json::object();
    for (const auto& [model, p] : prices_) {
        j[model] = {{"input_per_1k", p.input_per_1k.to_string()}, {"output_per_1k", p.output_per_1k.to_string()}};
    }
    return j;
}

void PriceTable::set(const std::string& model, ModelPrice price) { prices_[model] = price; }

const ModelPrice& PriceTable::at(const std::string& model) const {
    auto it = prices_.find(model);
    if (it == prices_.end()) throw CostError(CostErrorCode::UnknownModel, "no price for model '" + model + "'");
    return it->second;
}

Money accumulate_cost(const Usage& usage, const ModelPrice& price) {
    const __int128 in = static_cast<__int128>(usage.prompt_tokens) * (price.input_per_1k.units() / 1000);
    const __int128 out = static_cast<__int128>(usage.completion_tokens) * (price.output_per_1k.units() / 1000);
    const __int128 sum = in + out;
    if (sum > std::numeric_limits<std::int64_t>::max()) throw CostError(CostErrorCode::Overflow, "cost overflow");
    return Money::from_units(static_cast<std::int64_t>(sum));
}

Money accumulate_cost(const Usage& usage, const PriceTable& table, const std::string& model) {
    return accumulate_cost(usage, table.at(model));
}

CostLedger::CostLedger(PriceTable table) : table_(std::move(table)) {}

Money CostLedger::record(const std::string& model, const Usage& usage) {
    const Money cost = table_.empty() ? Money{} : accumulate_cost(usage, table_, model);
    std::lock_guard lock(mu_);
    entries_.push_back({model, usage, cost});
    total_ += cost;
    return cost;
}

Money CostLedger::total() const {
    std::lock_guard lock(mu_);
    return total_;
}

std::vector<CostLedger::Entry> CostLedger::entries() const {
    std::lock_guard lock(mu_);
    return entries_;
}

}  // namespace cellflow
