#include <stdio.h>

int checksum(const char *s, int n) {
    int acc = 0;
    for (int i = 0; i < n; i++) {
        acc += s[i];
    }
    return acc;
}

int classify(int value) {
    if (value > 100) {
        return 2;
    }
    return 1;
}

int main(int argc, char **argv) {
    int c = checksum("hello", 5);
    int k = classify(c);
    printf("%d %d\n", c, k);
    return k;
}
