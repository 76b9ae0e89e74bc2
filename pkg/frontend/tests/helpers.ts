export async function waitFor(condition: () => boolean, what: string,
                              timeoutMs = 5000): Promise<void> {
  const start = Date.now();
  while (!condition()) {
    if (Date.now() - start > timeoutMs) {
      throw new Error(`timed out waiting for ${what}`);
    }
    await new Promise((resolve) => setTimeout(resolve, 10));
  }
}

export function setSlider(root: HTMLElement, handle: string, value: number): void {
  const row = root.querySelector(`li[data-handle="${handle}"]`);
  if (row === null) throw new Error(`no stimulus row for ${handle}`);
  const slider = row.querySelector("input[type=range]") as HTMLInputElement;
  slider.value = String(value);
  slider.dispatchEvent(new Event("input", { bubbles: true }));
}

export function header(root: HTMLElement): string {
  return root.querySelector("header")?.textContent ?? "";
}

export function completionCode(root: HTMLElement): string | null {
  return root.querySelector("code.completion-code")?.textContent ?? null;
}
