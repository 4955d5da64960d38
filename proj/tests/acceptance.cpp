// Acceptance suite: runs every criterion at its pinned tolerance and prints
// one pass/fail line per criterion. Nonzero exit on any failure.

#include <iostream>

#include "dnflow/checks.hpp"

int main() {
  dnflow::CheckBudgets budgets;
  budgets.artifact_dir = "acceptance_artifacts";
  const auto results = dnflow::run_acceptance(budgets);
  return dnflow::print_acceptance(results, std::cout) == 0 ? 0 : 1;
}
