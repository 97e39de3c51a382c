// Rating session logic, kept free of DOM so it is directly testable.
//
// Candidates arrive from the API in canonical order, which is already
// ascending aspect ratio, so "next unrated" is simply the first index
// this rater has not rated yet.

export interface SessionState {
  imageId: string;
  total: number;
  rated: Set<number>;
  current: number | null;
  message: string;
}

export function startSession(
  imageId: string,
  total: number,
  rated: Iterable<number> = [],
): SessionState {
  const done = new Set(rated);
  return {
    imageId,
    total,
    rated: done,
    current: nextUnrated(done, total, 0),
    message: '',
  };
}

export function nextUnrated(
  rated: Set<number>,
  total: number,
  from: number,
): number | null {
  for (let i = Math.max(from, 0); i < total; i++) {
    if (!rated.has(i)) {
      return i;
    }
  }
  // wrap around so arrow navigation past the end still finds work
  for (let i = 0; i < Math.min(from, total); i++) {
    if (!rated.has(i)) {
      return i;
    }
  }
  return null;
}

// Keys 1-5 rate; anything else is ignored by the rating handler.
export function keyToScore(key: string): number | null {
  if (key.length === 1 && key >= '1' && key <= '5') {
    return Number(key);
  }
  return null;
}

export function stepCurrent(state: SessionState, delta: number): SessionState {
  if (state.current === null || state.total === 0) {
    return state;
  }
  const next = (state.current + delta + state.total) % state.total;
  return { ...state, current: next, message: '' };
}

export interface RatingOutcome {
  status: number;
  error?: string;
}

// Applies the server's verdict for a rating POST on crop `index`.
// 200 and 409 both mean the slot is settled for this rater (409 is a
// duplicate, surfaced as a conflict but never retried); 422 keeps the
// cursor in place so the rater can correct the input.
export function applyRatingOutcome(
  state: SessionState,
  index: number,
  outcome: RatingOutcome,
): SessionState {
  if (outcome.status === 200 || outcome.status === 409) {
    const rated = new Set(state.rated);
    rated.add(index);
    return {
      ...state,
      rated,
      current: nextUnrated(rated, state.total, index + 1),
      message:
        outcome.status === 409
          ? `already rated crop ${index + 1}: ${outcome.error ?? 'conflict'}`
          : '',
    };
  }
  return {
    ...state,
    message: outcome.error ?? `rating failed with status ${outcome.status}`,
  };
}

export function progressLabel(state: SessionState): string {
  return `${state.rated.size}/${state.total} rated`;
}
