/**
 * Audio playback for rating screens.
 *
 * Decoding and output go through an AudioBackend so tests (and any
 * environment without Web Audio) can substitute a fake. The player owns
 * the per-stimulus state the screen gates on: played at least once,
 * currently loading, or failed and waiting for a retry.
 */

import { SessionApi } from "./api.js";

export interface AudioBackend {
  play(bytes: ArrayBuffer): Promise<void>;
}

export class WebAudioBackend implements AudioBackend {
  private context: AudioContext | null = null;

  async play(bytes: ArrayBuffer): Promise<void> {
    // Created on first use: browsers only allow audio after a user gesture.
    if (this.context === null) {
      this.context = new AudioContext();
    }
    if (this.context.state === "suspended") {
      await this.context.resume();
    }
    // decodeAudioData detaches its input, so hand it a copy.
    const buffer = await this.context.decodeAudioData(bytes.slice(0));
    const source = this.context.createBufferSource();
    source.buffer = buffer;
    source.connect(this.context.destination);
    return new Promise((resolve) => {
      source.onended = () => resolve();
      source.start();
    });
  }
}

export type PlayerStatus = "idle" | "loading" | "playing" | "played" | "error";

export class StimulusPlayer {
  private status: PlayerStatus = "idle";
  private playCount = 0;
  private bytes: ArrayBuffer | null = null;
  private listeners: Array<() => void> = [];

  constructor(private readonly api: Pick<SessionApi, "fetchAudio">,
              private readonly audioUrl: string,
              private readonly backend: AudioBackend) {}

  get state(): PlayerStatus {
    return this.status;
  }

  get played(): boolean {
    return this.playCount > 0;
  }

  get failed(): boolean {
    return this.status === "error";
  }

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private setStatus(status: PlayerStatus): void {
    this.status = status;
    for (const listener of this.listeners) listener();
  }

  /**
   * Fetch (once) and play the stimulus. Calling again replays; calling
   * after a failure retries the fetch. Errors land in `failed` rather
   * than propagating, so the button handler stays trivial.
   */
  async play(): Promise<void> {
    if (this.status === "loading" || this.status === "playing") return;
    try {
      if (this.bytes === null) {
        this.setStatus("loading");
        this.bytes = await this.api.fetchAudio(this.audioUrl);
      }
      this.setStatus("playing");
      await this.backend.play(this.bytes);
      this.playCount += 1;
      this.setStatus("played");
    } catch {
      this.bytes = null;
      this.setStatus("error");
    }
  }
}
