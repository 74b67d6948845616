// Hand-rolled canvas charts: a time-series line and a bar spectrum.
// Nothing here transforms data beyond scaling to pixels.

export interface LineChartOptions {
  yMin?: number;
  yMax?: number;
  color?: string;
  label?: string;
}

export function drawLineChart(
  canvas: HTMLCanvasElement,
  xs: number[],
  ys: number[],
  options: LineChartOptions = {},
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#11161d";
  ctx.fillRect(0, 0, width, height);
  if (xs.length < 2) return;

  const xMin = xs[0];
  const xMax = xs[xs.length - 1];
  const yMin = options.yMin ?? Math.min(...ys);
  const yMax = options.yMax ?? Math.max(...ys);
  const xSpan = xMax - xMin || 1;
  const ySpan = yMax - yMin || 1;
  const pad = 8;

  ctx.strokeStyle = "#2a3442";
  ctx.lineWidth = 1;
  for (const frac of [0.25, 0.5, 0.75]) {
    const gy = pad + (height - 2 * pad) * frac;
    ctx.beginPath();
    ctx.moveTo(pad, gy);
    ctx.lineTo(width - pad, gy);
    ctx.stroke();
  }

  ctx.strokeStyle = options.color ?? "#53b1fd";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  for (let i = 0; i < xs.length; i++) {
    const px = pad + ((xs[i] - xMin) / xSpan) * (width - 2 * pad);
    const py = height - pad - ((ys[i] - yMin) / ySpan) * (height - 2 * pad);
    if (i === 0) ctx.moveTo(px, py);
    else ctx.lineTo(px, py);
  }
  ctx.stroke();

  if (options.label) {
    ctx.fillStyle = "#8b98a9";
    ctx.font = "11px sans-serif";
    ctx.fillText(options.label, pad + 2, 14);
  }
}

export function drawSpectrum(canvas: HTMLCanvasElement, bins: number[]): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#11161d";
  ctx.fillRect(0, 0, width, height);
  if (!bins.length) return;
  const maxVal = Math.max(...bins, 1e-9);
  const barWidth = width / bins.length;
  ctx.fillStyle = "#7a5af8";
  for (let i = 0; i < bins.length; i++) {
    const h = Math.max(0, (bins[i] / maxVal) * (height - 10));
    ctx.fillRect(i * barWidth, height - h, Math.max(1, barWidth - 1), h);
  }
}
