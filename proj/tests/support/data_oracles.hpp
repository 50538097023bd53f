#ifndef MATRREC_TESTS_DATA_ORACLES_HPP
#define MATRREC_TESTS_DATA_ORACLES_HPP

#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "matrrec/data.hpp"

namespace matrrec::testing {

using data::InteractionRecord;

/// Skewed random corpus: popular users and items alongside a long tail, so
/// filtering usually needs several rounds.
inline std::vector<InteractionRecord> random_corpus(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const int users = 10 + static_cast<int>(rng() % 30);
    const int items = 8 + static_cast<int>(rng() % 25);
    const int n = 50 + static_cast<int>(rng() % 400);
    std::geometric_distribution<int> pick_user(3.0 / users), pick_item(3.0 / items);
    std::vector<InteractionRecord> out;
    for (int k = 0; k < n; ++k) {
        const int u = pick_user(rng) % users;
        const int i = pick_item(rng) % items;
        out.push_back({"u" + std::to_string(u), "i" + std::to_string(i), static_cast<std::int64_t>(rng() % 1000)});
    }
    return out;
}

/// Removes a single violating user or item per round until none remain.
inline std::vector<InteractionRecord> one_at_a_time_core(std::vector<InteractionRecord> recs, std::size_t k) {
    while (true) {
        std::map<std::string, std::size_t> users, items;
        for (const auto& r : recs) {
            ++users[r.user];
            ++items[r.item];
        }
        std::string drop_user, drop_item;
        for (const auto& [u, c] : users)
            if (c < k) {
                drop_user = u;
                break;
            }
        if (drop_user.empty())
            for (const auto& [i, c] : items)
                if (c < k) {
                    drop_item = i;
                    break;
                }
        if (drop_user.empty() && drop_item.empty()) return recs;
        std::vector<InteractionRecord> kept;
        for (const auto& r : recs)
            if (r.user != drop_user && r.item != drop_item) kept.push_back(r);
        recs = std::move(kept);
    }
}

inline bool meets_threshold(const std::vector<InteractionRecord>& recs, std::size_t k) {
    std::map<std::string, std::size_t> users, items;
    for (const auto& r : recs) {
        ++users[r.user];
        ++items[r.item];
    }
    for (const auto& [u, c] : users)
        if (c < k) return false;
    for (const auto& [i, c] : items)
        if (c < k) return false;
    return true;
}

/// True when `part` appears in `whole` in order.
inline bool is_subsequence(const std::vector<InteractionRecord>& part, const std::vector<InteractionRecord>& whole) {
    std::size_t j = 0;
    for (const auto& r : whole)
        if (j < part.size() && part[j] == r) ++j;
    return j == part.size();
}

/// Largest record count over every (user subset, item subset) whose induced
/// records satisfy the threshold. Exponential; tiny inputs only.
inline std::size_t max_core_size(const std::vector<InteractionRecord>& recs, std::size_t k) {
    std::vector<std::string> users, items;
    for (const auto& r : recs) {
        if (std::find(users.begin(), users.end(), r.user) == users.end()) users.push_back(r.user);
        if (std::find(items.begin(), items.end(), r.item) == items.end()) items.push_back(r.item);
    }
    std::size_t best = 0;
    for (std::size_t um = 0; um < (1u << users.size()); ++um)
        for (std::size_t im = 0; im < (1u << items.size()); ++im) {
            std::vector<InteractionRecord> sub;
            for (const auto& r : recs) {
                const auto ui = std::find(users.begin(), users.end(), r.user) - users.begin();
                const auto ii = std::find(items.begin(), items.end(), r.item) - items.begin();
                if ((um >> ui & 1) && (im >> ii & 1)) sub.push_back(r);
            }
            if (meets_threshold(sub, k)) best = std::max(best, sub.size());
        }
    return best;
}

}  // namespace matrrec::testing

#endif  // MATRREC_TESTS_DATA_ORACLES_HPP
