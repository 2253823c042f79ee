// Bounded log window with follow mode for the log viewer.

export const DEFAULT_CAPACITY = 10_000;

export class LogBuffer {
  private lines: string[] = [];
  private droppedCount = 0;
  follow = true;

  constructor(private readonly capacity: number = DEFAULT_CAPACITY) {
    if (capacity < 1) throw new RangeError("capacity must be >= 1");
  }

  /** Append raw text, splitting on newlines; oldest lines fall off. */
  push(text: string): void {
    if (text === "") return;
    for (const line of text.split("\n")) {
      this.lines.push(line);
    }
    const excess = this.lines.length - this.capacity;
    if (excess > 0) {
      this.lines.splice(0, excess);
      this.droppedCount += excess;
    }
  }

  /** Replace the whole window (full refetch), keeping only the tail. */
  replace(text: string): void {
    this.lines = [];
    this.droppedCount = 0;
    this.push(text);
  }

  snapshot(): string[] {
    return [...this.lines];
  }

  get length(): number {
    return this.lines.length;
  }

  get dropped(): number {
    return this.droppedCount;
  }

  /** Follow mode keeps the viewport pinned to the latest line. */
  toggleFollow(): boolean {
    this.follow = !this.follow;
    return this.follow;
  }
}
