// Trailing debounce with injectable timers so tests can drive the clock.

export interface Debounced<A extends unknown[]> {
  (...args: A): void;
  flush(): void;
  clear(): void;
}

export interface TimerHost {
  setTimeout(fn: () => void, ms: number): unknown;
  clearTimeout(id: unknown): void;
}

export function debounce<A extends unknown[]>(
  f: (...args: A) => void,
  ms: number,
  host: TimerHost = globalThis,
): Debounced<A> {
  let id: unknown = null;
  let last: A | null = null;

  const fire = () => {
    id = null;
    if (last !== null) {
      const args = last;
      last = null;
      f(...args);
    }
  };

  const result = ((...args: A) => {
    last = args;
    if (id !== null) host.clearTimeout(id);
    id = host.setTimeout(fire, ms);
  }) as Debounced<A>;
  result.flush = () => {
    if (id !== null) host.clearTimeout(id);
    fire();
  };
  result.clear = () => {
    if (id !== null) host.clearTimeout(id);
    id = null;
    last = null;
  };
  return result;
}
