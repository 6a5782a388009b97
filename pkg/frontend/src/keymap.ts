// Keyboard state -> one action name per frame slot.

export type Keymap = Record<string, string>; // key code -> action name

export const DEFAULT_KEYMAP: Keymap = {
  ArrowUp: "up",
  ArrowDown: "down",
  ArrowLeft: "left",
  ArrowRight: "right",
  KeyW: "up",
  KeyS: "down",
  KeyA: "left",
  KeyD: "right",
  Space: "paint",
};

// Simultaneous keys resolve by this fixed order; holding nothing yields noop.
export const ACTION_PRIORITY = ["up", "down", "left", "right", "paint", "noop"];

export class KeyTracker {
  private held = new Set<string>();
  constructor(private keymap: Keymap = DEFAULT_KEYMAP) {}

  keyDown(code: string): void {
    if (code in this.keymap) this.held.add(code);
  }

  keyUp(code: string): void {
    this.held.delete(code);
  }

  /** Sample the current key state into a single action name. */
  sample(): string {
    const active = new Set<string>();
    for (const code of this.held) active.add(this.keymap[code]);
    for (const action of ACTION_PRIORITY) {
      if (active.has(action)) return action;
    }
    return "noop";
  }

  heldCount(): number {
    return this.held.size;
  }
}
