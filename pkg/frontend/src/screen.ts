/**
 * One MUSHRA rating screen: a labeled reference player plus the served
 * stimuli, each with a play button and a 0-100 slider.
 *
 * Sliders start unset and only count after the listener moves them, so
 * every transmitted score is deliberate. Stimuli keep the exact order
 * the server sent; labels are positional (A, B, C, ...) and never hint
 * at which system produced a stimulus.
 */

import { ScoreEntry, ScreenPayload } from "./api.js";
import { StimulusPlayer } from "./player.js";

export interface ScreenConfig {
  /**
   * Require every stimulus to have been played before submitting.
   * A local quality guard, not part of the rating protocol; disable it
   * for setups where playback is verified some other way.
   */
  requirePlayback: boolean;
}

export const DEFAULT_CONFIG: ScreenConfig = { requirePlayback: true };

const PLAY_LABELS: Record<string, string> = {
  idle: "Play",
  loading: "Loading...",
  playing: "Playing",
  played: "Replay",
  error: "Retry",
};

function playButton(player: StimulusPlayer): HTMLButtonElement {
  const button = document.createElement("button");
  button.type = "button";
  button.className = "play";
  button.textContent = PLAY_LABELS[player.state] ?? "Play";
  button.addEventListener("click", () => { void player.play(); });
  player.onChange(() => {
    button.textContent = PLAY_LABELS[player.state] ?? "Play";
    button.classList.toggle("failed", player.failed);
  });
  return button;
}

export class RatingScreen {
  private sliders = new Map<string, HTMLInputElement>();
  private touched = new Set<string>();
  private submitButton!: HTMLButtonElement;
  private hint!: HTMLElement;
  private submitHandler: ((scores: ScoreEntry[]) => void) | null = null;

  constructor(private readonly payload: ScreenPayload,
              private readonly players: Map<string, StimulusPlayer>,
              private readonly referencePlayer: StimulusPlayer,
              private readonly config: ScreenConfig = DEFAULT_CONFIG) {}

  onSubmit(handler: (scores: ScoreEntry[]) => void): void {
    this.submitHandler = handler;
  }

  render(container: HTMLElement): void {
    container.replaceChildren();

    const header = document.createElement("header");
    header.textContent =
      `Screen ${this.payload.screen_index + 1} of ${this.payload.total_screens}`;
    container.appendChild(header);

    const reference = document.createElement("section");
    reference.className = "reference";
    const refLabel = document.createElement("span");
    refLabel.className = "label";
    refLabel.textContent = "Reference";
    reference.append(refLabel, playButton(this.referencePlayer));
    container.appendChild(reference);

    const list = document.createElement("ul");
    list.className = "stimuli";
    this.payload.stimuli.forEach((stimulus, index) => {
      const player = this.players.get(stimulus.handle);
      if (player === undefined) {
        throw new Error(`no player for handle ${stimulus.handle}`);
      }
      list.appendChild(this.stimulusRow(stimulus.handle, index, player));
    });
    container.appendChild(list);

    this.submitButton = document.createElement("button");
    this.submitButton.type = "button";
    this.submitButton.className = "submit";
    this.submitButton.textContent = "Submit ratings";
    this.submitButton.addEventListener("click", () => {
      if (!this.isSubmittable() || this.submitHandler === null) return;
      this.submitHandler(this.scores());
    });
    container.appendChild(this.submitButton);

    this.hint = document.createElement("p");
    this.hint.className = "hint";
    container.appendChild(this.hint);

    for (const player of this.players.values()) {
      player.onChange(() => this.refresh());
    }
    this.refresh();
  }

  private stimulusRow(handle: string, index: number,
                      player: StimulusPlayer): HTMLLIElement {
    const row = document.createElement("li");
    row.className = "stimulus";
    row.dataset.handle = handle;

    const label = document.createElement("span");
    label.className = "label";
    label.textContent = String.fromCharCode(65 + index);

    const slider = document.createElement("input");
    slider.type = "range";
    slider.min = "0";
    slider.max = "100";
    slider.step = "1";
    slider.value = "50";
    slider.classList.add("unset");

    const value = document.createElement("output");
    value.textContent = "--";

    slider.addEventListener("input", () => {
      this.touched.add(handle);
      slider.classList.remove("unset");
      value.textContent = slider.value;
      this.refresh();
    });
    this.sliders.set(handle, slider);

    row.append(label, playButton(player), slider, value);
    return row;
  }

  /** Scores in served stimulus order, integers straight off the sliders. */
  scores(): ScoreEntry[] {
    return this.payload.stimuli.map((stimulus) => {
      const slider = this.sliders.get(stimulus.handle)!;
      return { handle: stimulus.handle, score: parseInt(slider.value, 10) };
    });
  }

  isSubmittable(): boolean {
    return this.missing().length === 0;
  }

  private missing(): string[] {
    const reasons: string[] = [];
    const unrated = this.payload.stimuli
      .filter((s) => !this.touched.has(s.handle)).length;
    if (unrated > 0) reasons.push(`${unrated} slider(s) not set`);
    if (this.config.requirePlayback) {
      let unplayed = 0;
      let failed = 0;
      for (const stimulus of this.payload.stimuli) {
        const player = this.players.get(stimulus.handle)!;
        if (player.failed) failed += 1;
        else if (!player.played) unplayed += 1;
      }
      if (unplayed > 0) reasons.push(`${unplayed} stimulus(es) not played`);
      if (failed > 0) reasons.push(`${failed} stimulus(es) failed to load, retry`);
    }
    return reasons;
  }

  private refresh(): void {
    const reasons = this.missing();
    this.submitButton.disabled = reasons.length > 0;
    this.hint.textContent = reasons.length > 0
      ? `To submit: ${reasons.join("; ")}.`
      : "";
  }

  /** Re-enable submission after a failed POST; same sliders, same payload. */
  submissionFailed(message: string): void {
    this.refresh();
    this.hint.textContent = `${message} Submit again to retry.`;
  }

  lockWhileSubmitting(): void {
    this.submitButton.disabled = true;
    this.hint.textContent = "Submitting...";
  }
}
