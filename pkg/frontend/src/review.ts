// Review-tab helpers: compare human MOS ordering with model ordering.
// All scores come from the API verbatim; this module only arranges and
// formats them for display.

import type { Candidate, RankingEntry } from './api';

export interface ReviewRow {
  k: number;
  mosIndex: number;
  mosValue: number;
  modelIndex: number;
  modelValue: number;
  agree: boolean;
}

// Two decimals everywhere a score is shown.
export function formatScore(value: number | null | undefined): string {
  if (value === null || value === undefined || Number.isNaN(value)) {
    return '-';
  }
  return value.toFixed(2);
}

// Top-K comparison rows for K = 1..4. MOS side ranks candidates by mean
// opinion score (ties broken by candidate index, matching the server's
// ranking rule); model side uses the server-provided order as-is.
export function buildReviewRows(
  candidates: Candidate[],
  ranking: RankingEntry[],
  maxK = 4,
): ReviewRow[] {
  const rated = candidates
    .map((c) => ({ index: c.index, mos: c.mos }))
    .filter((c): c is { index: number; mos: number } => typeof c.mos === 'number');
  rated.sort((a, b) => b.mos - a.mos || a.index - b.index);

  const rows: ReviewRow[] = [];
  const limit = Math.min(maxK, rated.length, ranking.length);
  for (let k = 1; k <= limit; k++) {
    const mosPick = rated[k - 1];
    const modelPick = ranking[k - 1];
    rows.push({
      k,
      mosIndex: mosPick.index,
      mosValue: mosPick.mos,
      modelIndex: modelPick.index,
      modelValue: modelPick.score,
      agree: mosPick.index === modelPick.index,
    });
  }
  return rows;
}

export function srccLabel(srcc: number | null): string {
  return srcc === null ? 'SRCC: n/a' : `SRCC: ${formatScore(srcc)}`;
}
