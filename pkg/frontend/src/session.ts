/**
 * Session controller: walks a listener through their screens in server
 * order and ends on the completion code.
 *
 * The server is the source of truth for position. Every render starts
 * from GET /api/session/{token}, so a reload resumes at the first
 * unsubmitted screen, and a submission conflict (double click, second
 * tab) is resolved by re-fetching rather than by local bookkeeping.
 */

import { ConflictError, isComplete, ScoreEntry, ScreenPayload,
         SessionApi, SessionState } from "./api.js";
import { AudioBackend, StimulusPlayer, WebAudioBackend } from "./player.js";
import { DEFAULT_CONFIG, RatingScreen, ScreenConfig } from "./screen.js";

export class SessionController {
  private inFlight = false;
  private currentScreen: RatingScreen | null = null;

  constructor(private readonly api: SessionApi,
              private readonly token: string,
              private readonly root: HTMLElement,
              private readonly backend: AudioBackend = new WebAudioBackend(),
              private readonly config: ScreenConfig = DEFAULT_CONFIG) {}

  async start(): Promise<void> {
    await this.sync();
  }

  /** Fetch the session state and render whatever the server says is next. */
  private async sync(): Promise<void> {
    let state: SessionState;
    try {
      state = await this.api.getSession(this.token);
    } catch (error) {
      this.renderFatal(error instanceof Error ? error.message : String(error));
      return;
    }
    if (isComplete(state)) {
      this.renderCompletion(state.completion_code);
    } else {
      this.renderScreen(state);
    }
  }

  private renderScreen(payload: ScreenPayload): void {
    const players = new Map<string, StimulusPlayer>();
    for (const stimulus of payload.stimuli) {
      players.set(stimulus.handle,
                  new StimulusPlayer(this.api, stimulus.audio_url, this.backend));
    }
    const reference = new StimulusPlayer(
      this.api, payload.utterance_ref.audio_url, this.backend);

    const screen = new RatingScreen(payload, players, reference, this.config);
    screen.onSubmit((scores) => { void this.submit(payload, screen, scores); });
    screen.render(this.root);
    this.currentScreen = screen;
  }

  private async submit(payload: ScreenPayload, screen: RatingScreen,
                       scores: ScoreEntry[]): Promise<void> {
    if (this.inFlight) return;
    this.inFlight = true;
    screen.lockWhileSubmitting();
    try {
      await this.api.submitRatings(this.token, payload.screen_index, scores);
      await this.sync();
    } catch (error) {
      if (error instanceof ConflictError) {
        // Already recorded (or another tab moved on): the server's view wins.
        await this.sync();
      } else {
        screen.submissionFailed(
          error instanceof Error ? error.message : "Submission failed.");
      }
    } finally {
      this.inFlight = false;
    }
  }

  private renderCompletion(code: string): void {
    this.currentScreen = null;
    this.root.replaceChildren();
    const done = document.createElement("section");
    done.className = "completion";
    const heading = document.createElement("h2");
    heading.textContent = "All screens rated. Thank you!";
    const codeLine = document.createElement("p");
    codeLine.textContent = "Your completion code: ";
    const codeEl = document.createElement("code");
    codeEl.className = "completion-code";
    codeEl.textContent = code;
    codeLine.appendChild(codeEl);
    done.append(heading, codeLine);
    this.root.appendChild(done);
  }

  private renderFatal(message: string): void {
    this.currentScreen = null;
    this.root.replaceChildren();
    const error = document.createElement("p");
    error.className = "fatal";
    error.textContent = `Could not load the session: ${message}`;
    this.root.appendChild(error);
  }
}
