// Entry point: wires the rating and review views to the DOM.
//
// Keyboard-first rating flow: pick an image, then press 1-5 to rate the
// highlighted crop; the cursor advances to the next unrated crop. The
// review tab shows the model ranking against the MOS ranking for the
// same image, with the server-computed SRCC in the header.

import {
  Candidate,
  getCandidates,
  getNextUnrated,
  getRankings,
  imageFileUrl,
  ImageInfo,
  listImages,
  postRating,
} from './api';
import { overlayRect } from './overlay';
import {
  applyRatingOutcome,
  keyToScore,
  progressLabel,
  SessionState,
  startSession,
  stepCurrent,
} from './rating';
import { buildReviewRows, formatScore, srccLabel } from './review';

interface AppState {
  images: ImageInfo[];
  image: ImageInfo | null;
  candidates: Candidate[];
  session: SessionState | null;
}

const state: AppState = { images: [], image: null, candidates: [], session: null };

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function raterName(): string {
  const input = el<HTMLInputElement>('rater');
  return input.value.trim() || 'anonymous';
}

function setStatus(text: string): void {
  el<HTMLElement>('status').textContent = text;
}

function renderImageList(): void {
  const list = el<HTMLSelectElement>('image-select');
  list.innerHTML = '';
  for (const info of state.images) {
    const opt = document.createElement('option');
    opt.value = info.id;
    opt.textContent = `${info.id} (${info.w}x${info.h}, ${Math.round(info.rating_progress * 100)}% rated)`;
    list.appendChild(opt);
  }
}

function renderOverlay(): void {
  const box = el<HTMLElement>('crop-box');
  const img = el<HTMLImageElement>('photo');
  const session = state.session;
  if (!state.image || !session || session.current === null || !img.clientWidth) {
    box.style.display = 'none';
    return;
  }
  const crop = state.candidates[session.current];
  const rect = overlayRect(crop, state.image.h, state.image.w, img.clientWidth, img.clientHeight);
  box.style.display = 'block';
  box.style.left = `${rect.left}px`;
  box.style.top = `${rect.top}px`;
  box.style.width = `${rect.width}px`;
  box.style.height = `${rect.height}px`;
}

function renderSession(): void {
  const session = state.session;
  if (!session) {
    return;
  }
  const label =
    session.current === null
      ? 'all crops rated'
      : `crop ${session.current + 1} of ${session.total}`;
  el<HTMLElement>('crop-label').textContent = `${label} (${progressLabel(session)})`;
  if (session.message) {
    setStatus(session.message);
  }
  renderOverlay();
}

async function selectImage(id: string): Promise<void> {
  const info = state.images.find((i) => i.id === id) ?? null;
  state.image = info;
  if (!info) {
    return;
  }
  const img = el<HTMLImageElement>('photo');
  img.src = imageFileUrl(info.id);
  state.candidates = await getCandidates(info.id);
  const cursor = await getNextUnrated(info.id, raterName());
  const rated: number[] = [];
  if (cursor === null) {
    for (const c of state.candidates) {
      rated.push(c.index);
    }
  } else {
    for (let i = 0; i < cursor; i++) {
      rated.push(i);
    }
  }
  state.session = startSession(info.id, state.candidates.length, rated);
  if (cursor !== null) {
    state.session = { ...state.session, current: cursor };
  }
  setStatus('');
  renderSession();
  void renderReview();
}

async function rateCurrent(score: number): Promise<void> {
  const session = state.session;
  if (!state.image || !session || session.current === null) {
    return;
  }
  const index = session.current;
  const result = await postRating(state.image.id, index, raterName(), score);
  if (result.ok) {
    state.session = applyRatingOutcome(session, index, { status: 200 });
    setStatus(`crop ${index + 1}: mos ${formatScore(result.data.mos)} from ${result.data.count} ratings`);
  } else {
    state.session = applyRatingOutcome(session, index, {
      status: result.status,
      error: result.error,
    });
  }
  renderSession();
  void renderReview();
}

async function renderReview(): Promise<void> {
  const table = el<HTMLTableSectionElement>('review-body');
  const header = el<HTMLElement>('review-srcc');
  table.innerHTML = '';
  if (!state.image) {
    return;
  }
  const result = await getRankings(state.image.id);
  if (!result.ok) {
    header.textContent = result.error;
    return;
  }
  header.textContent = srccLabel(result.data.srcc);
  const rows = buildReviewRows(state.candidates, result.data.crops);
  for (const row of rows) {
    const tr = document.createElement('tr');
    const cells = [
      `${row.k}`,
      `#${row.mosIndex + 1} (${formatScore(row.mosValue)})`,
      `#${row.modelIndex + 1} (${formatScore(row.modelValue)})`,
      row.agree ? 'yes' : 'no',
    ];
    for (const text of cells) {
      const td = document.createElement('td');
      td.textContent = text;
      tr.appendChild(td);
    }
    table.appendChild(tr);
  }
}

function onKey(event: KeyboardEvent): void {
  if (event.target instanceof HTMLInputElement) {
    return;
  }
  const score = keyToScore(event.key);
  if (score !== null) {
    void rateCurrent(score);
    return;
  }
  if (state.session) {
    if (event.key === 'ArrowRight') {
      state.session = stepCurrent(state.session, 1);
      renderSession();
    } else if (event.key === 'ArrowLeft') {
      state.session = stepCurrent(state.session, -1);
      renderSession();
    }
  }
}

async function init(): Promise<void> {
  state.images = await listImages();
  renderImageList();
  const select = el<HTMLSelectElement>('image-select');
  select.addEventListener('change', () => void selectImage(select.value));
  el<HTMLInputElement>('rater').addEventListener('change', () => {
    if (select.value) {
      void selectImage(select.value);
    }
  });
  el<HTMLImageElement>('photo').addEventListener('load', renderOverlay);
  window.addEventListener('resize', renderOverlay);
  document.addEventListener('keydown', onKey);
  if (state.images.length > 0) {
    select.value = state.images[0].id;
    await selectImage(select.value);
  } else {
    setStatus('no images in the dataset');
  }
}

void init();
