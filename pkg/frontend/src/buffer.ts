// Bounded chart series. The UI must survive days of streaming, so every
// series evicts its oldest point once it reaches capacity.

export interface Point {
  x: number;
  y: number;
}

export class SeriesBuffer {
  private points: Point[] = [];
  private start = 0; // index of the logical head inside `points`

  constructor(readonly capacity: number = 5000) {
    if (capacity < 1) throw new Error("capacity must be >= 1");
  }

  push(x: number, y: number): void {
    this.points.push({ x, y });
    if (this.points.length - this.start > this.capacity) {
      this.start++;
      // Compact occasionally so the backing array stays bounded too.
      if (this.start > this.capacity) {
        this.points = this.points.slice(this.start);
        this.start = 0;
      }
    }
  }

  get length(): number {
    return this.points.length - this.start;
  }

  at(i: number): Point {
    return this.points[this.start + i];
  }

  last(): Point | undefined {
    return this.length ? this.at(this.length - 1) : undefined;
  }

  toArrays(): { xs: number[]; ys: number[] } {
    const xs = new Array<number>(this.length);
    const ys = new Array<number>(this.length);
    for (let i = 0; i < this.length; i++) {
      xs[i] = this.at(i).x;
      ys[i] = this.at(i).y;
    }
    return { xs, ys };
  }
}
