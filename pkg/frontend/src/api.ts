// Typed client for the annotation service HTTP API. The UI never
// computes MOS or SRCC itself; every displayed value comes from here.

export interface ImageInfo {
  id: string;
  h: number;
  w: number;
  n_candidates: number;
  rating_progress: number;
}

export interface Candidate {
  index: number;
  x1: number;
  y1: number;
  x2: number;
  y2: number;
  aspect_ratio: number;
  count: number;
  mos?: number;
  std?: number;
}

export interface RatingStats {
  mos: number;
  std: number;
  count: number;
}

export interface RankingEntry {
  index: number;
  score: number;
  x1: number;
  y1: number;
  x2: number;
  y2: number;
  mos?: number;
}

export interface Rankings {
  srcc: number | null;
  crops: RankingEntry[];
}

export type ApiResult<T> =
  | { ok: true; data: T }
  | { ok: false; status: number; error: string };

async function asResult<T>(res: Response): Promise<ApiResult<T>> {
  if (res.ok) {
    return { ok: true, data: (await res.json()) as T };
  }
  let message = res.statusText;
  try {
    const body = await res.json();
    if (body && typeof body.error === 'string') {
      message = body.error;
    }
  } catch {
    // non-JSON error body; keep the status text
  }
  return { ok: false, status: res.status, error: message };
}

export async function listImages(): Promise<ImageInfo[]> {
  const res = await fetch('/api/images');
  if (!res.ok) {
    throw new Error(`listing images failed: ${res.status}`);
  }
  return (await res.json()) as ImageInfo[];
}

export async function getCandidates(imageId: string): Promise<Candidate[]> {
  const res = await fetch(`/api/images/${encodeURIComponent(imageId)}/candidates`);
  if (!res.ok) {
    throw new Error(`candidates for ${imageId} failed: ${res.status}`);
  }
  return (await res.json()) as Candidate[];
}

export async function getNextUnrated(
  imageId: string,
  rater: string,
): Promise<number | null> {
  const res = await fetch(
    `/api/images/${encodeURIComponent(imageId)}/next?rater=${encodeURIComponent(rater)}`,
  );
  if (!res.ok) {
    throw new Error(`cursor for ${imageId} failed: ${res.status}`);
  }
  const body = (await res.json()) as { crop_index: number | null };
  return body.crop_index;
}

export async function postRating(
  imageId: string,
  cropIndex: number,
  rater: string,
  score: number,
): Promise<ApiResult<RatingStats>> {
  const res = await fetch(
    `/api/images/${encodeURIComponent(imageId)}/crops/${cropIndex}/ratings`,
    {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ rater, score }),
    },
  );
  return asResult<RatingStats>(res);
}

export async function getRankings(imageId: string): Promise<ApiResult<Rankings>> {
  const res = await fetch(`/api/images/${encodeURIComponent(imageId)}/rankings`);
  return asResult<Rankings>(res);
}

export function imageFileUrl(imageId: string): string {
  return `/api/images/${encodeURIComponent(imageId)}/file`;
}
